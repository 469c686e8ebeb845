#pragma once

// Prediction and attention-map export shared by the CLI and the tests.

#include <string>

#include "mafnet/checkpoint.hpp"

namespace mafnet {

struct PredictResult {
    Tensor<float> density;  // [1, Hp/8, Wp/8]
    double count = 0.0;
    int pad_h = 0, pad_w = 0;
};

// Loads one RGB/thermal file pair, reflect-pads to the divisibility
// contract and runs the model.
PredictResult predict_pair(const Checkpoint& ckpt, const std::string& rgb_path,
                           const std::string& thermal_path);

// Runs one forward pass and writes, per MAF module / block / branch / head,
// the post-softmax attention matrix as a tensor file plus a row-normalized
// 8-bit PGM heatmap. Returns the number of exported matrices.
int export_attention_maps(const Checkpoint& ckpt, const std::string& rgb_path,
                          const std::string& thermal_path, const std::string& out_dir);

}  // namespace mafnet
