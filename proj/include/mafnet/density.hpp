#pragma once

// Ground-truth density generation from head annotations and the counting
// metrics (MAE, RMSE, GAME). All arithmetic is 64-bit; predicted maps from
// the 32-bit model are widened before they get here.

#include <array>
#include <string>
#include <vector>

#include "mafnet/tensor.hpp"

namespace mafnet {

class AnnotationError : public std::runtime_error {
public:
    explicit AnnotationError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PointAnnotation {
    // (x, y) with x = column, y = row, origin top-left, in pixels.
    std::vector<std::array<double, 2>> points;
};

struct DensityConfig {
    int kernel_size = 7;  // odd
    double sigma = 2.0;
    bool renormalize_at_border = true;
};

struct DensityMap {
    Tensor<double> grid;  // [1, h, w], non-negative
    double scale = 1.0;   // fraction of the source image resolution

    int height() const { return grid.shape()[1]; }
    int width() const { return grid.shape()[2]; }
};

struct CountMetrics {
    double mae = 0.0;
    double rmse = 0.0;
    std::array<double, 4> game{0.0, 0.0, 0.0, 0.0};
    int n_images = 0;
};

// Row-major accumulation; the canonical integral of a map.
double density_sum(const DensityMap& d);

// Stamps one renormalized Gaussian kernel per head point; each point
// contributes mass exactly 1 even when its kernel is clipped at a border.
DensityMap generate_density(const PointAnnotation& ann, int height, int width,
                            const DensityConfig& cfg = {});

// Non-overlapping block sums (not means), preserving the integral.
DensityMap downsample_density(const DensityMap& d, int factor);

std::pair<double, double> mae_rmse(const std::vector<double>& pred_counts,
                                   const std::vector<double>& gt_counts);

// Grid Average Mean Absolute Error for one image: 4^level regions with
// floor-based edges, absolute count error summed over regions.
double game(const DensityMap& pred, const DensityMap& gt, int level);

// Mean over the batch of the per-map sum of squared cell differences.
double mse_loss(const std::vector<DensityMap>& pred, const std::vector<DensityMap>& gt);

// Dataset-level aggregation: counts drive mae/rmse, game levels are means
// of the per-image values.
CountMetrics compute_metrics(const std::vector<DensityMap>& pred,
                             const std::vector<DensityMap>& gt);

}  // namespace mafnet
