#pragma once

// Paired RGB-T dataset IO, geometry-consistent augmentation, and the
// synthetic scene generator that keeps every test self-contained.
//
// On-disk layout: root/rgb/<id>.ppm, root/thermal/<id>.pgm,
// root/ann/<id>.json with {"points": [[x, y], ...], "illumination":
// "bright"|"dark"}; x = column, y = row, floats.

#include <string>
#include <vector>

#include "mafnet/density.hpp"
#include "mafnet/rng.hpp"
#include "mafnet/tensor.hpp"

namespace mafnet {

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class Illumination { bright, dark, unknown };

std::string illumination_name(Illumination il);

struct AnnotatedPair {
    std::string id;
    Tensor<float> rgb;      // [3,H,W] in [-1,1]
    Tensor<float> thermal;  // [1,H,W] in [-1,1]
    PointAnnotation annotation;
    Illumination illumination = Illumination::unknown;

    int height() const { return rgb.shape()[1]; }
    int width() const { return rgb.shape()[2]; }
};

// Lexicographically ordered by id; every id must have all three files, all
// points in bounds, and registered extents across modalities.
std::vector<AnnotatedPair> load_dataset(const std::string& root);

struct AugmentConfig {
    int crop_size = 256;
    double hflip_prob = 0.5;
    double rescale_min = 0.8;
    double rescale_max = 1.2;
    uint64_t seed = 0;
};

// One identical geometric transform applied to both images and the points:
// uniform rescale (resampled up to 10 times if the result no longer covers
// the crop), random crop with out-of-crop points dropped, horizontal flip.
// The rng is the caller's per-(seed, epoch, sample) stream.
AnnotatedPair augment(const AnnotatedPair& pair, const AugmentConfig& cfg, Rng& rng);

// Bilinear resample with the same half-pixel coordinate convention as the
// tensor engine, usable for downscaling; augmentation plumbing.
Tensor<float> resize_bilinear_image(const Tensor<float>& img, int out_h, int out_w);

// Reflect padding on the bottom/right edges (mirror excluding the edge
// pixel); evaluation uses it to reach the model's divisibility contract.
Tensor<float> pad_reflect(const Tensor<float>& img, int out_h, int out_w);

struct SynthConfig {
    int pairs = 8;
    int size = 64;  // H = W, divisible by 64
    int count_min = 1;
    int count_max = 12;
    double darkness_prob = 0.0;   // RGB intensities collapsed to 10%
    double crossover_prob = 0.0;  // thermal blob contrast collapsed to 10%
    uint64_t seed = 1;
};

// Writes a dataset of rendered scenes: textured RGB with disc-shaped heads,
// thermal with bright Gaussian blobs at the same positions; annotations
// store the exact sampled points.
void synthesize(const SynthConfig& cfg, const std::string& out_root);

}  // namespace mafnet
