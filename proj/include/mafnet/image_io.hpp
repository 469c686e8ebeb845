#pragma once

// Binary PNM image IO: P6 (8-bit RGB) for the visible stream, P5 (8-bit
// gray) for thermal. Pixels are interleaved row-major, top-left origin.

#include <cstdint>
#include <string>
#include <vector>

#include "mafnet/tensor.hpp"
#include "mafnet/tensor_io.hpp"

namespace mafnet {

struct ImageU8 {
    int channels = 0;  // 1 or 3
    int height = 0;
    int width = 0;
    std::vector<uint8_t> pixels;  // interleaved, size = c*h*w

    uint8_t at(int c, int y, int x) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// Reads P5 or P6 with maxval 255; throws IoError on anything else.
ImageU8 read_pnm(const std::string& path);
void write_pnm(const ImageU8& img, const std::string& path);

// Planar [C,H,W] tensor normalized to [-1, 1] via (v/255 - 0.5)/0.5.
Tensor<float> image_to_tensor(const ImageU8& img);

// 8-bit preview of a non-negative map, scaled so the global maximum maps to
// 255 (all-zero maps stay black).
ImageU8 map_to_pgm_preview(const Tensor<float>& map);

// Per-row scaling instead of global: each row's maximum maps to 255. Used
// for attention-weight heatmaps.
ImageU8 rows_to_pgm_heatmap(const Tensor<float>& mat);

}  // namespace mafnet
