#pragma once

// Training loop (seeded init, augmented batches, density-map MSE, AdamW
// with linear warmup) and the evaluation driver.

#include <string>
#include <vector>

#include "mafnet/checkpoint.hpp"
#include "mafnet/config.hpp"
#include "mafnet/dataset.hpp"
#include "mafnet/density.hpp"

namespace mafnet {

struct TrainResult {
    std::vector<double> losses;  // one entry per iteration
    std::string final_checkpoint;
};

// Runs cfg.max_iters iterations over the dataset at cfg.data_root, writing
// loss_log.csv, periodic checkpoints and ckpt_final under cfg.out_dir.
// A non-finite loss or gradient checkpoints the last good parameters into
// ckpt_abort and rethrows as NumericError.
TrainResult run_train(const RunConfig& cfg);

// Turns one (possibly augmented) sample into the network input tensors and
// its 1/8-scale ground-truth density target.
Tensor<float> density_target(const AnnotatedPair& pair);

struct EvalRecord {
    std::string id;
    double pred_count = 0.0;
    double gt_count = 0.0;
    int pad_h = 0, pad_w = 0;
};

struct EvalReport {
    CountMetrics metrics;
    std::vector<EvalRecord> per_image;
    std::string split;
};

// No augmentation; full images, reflect-padded up to the divisibility
// contract (ground truth is generated at the padded size from the unpadded
// points, so counts are unaffected).
EvalReport run_evaluate(const Checkpoint& ckpt, const std::string& data_root,
                        const std::string& split);

void write_report_json(const EvalReport& report, const std::string& path);

}  // namespace mafnet
