#include "mafnet/export.hpp"

#include <filesystem>

#include "mafnet/dataset.hpp"
#include "mafnet/image_io.hpp"
#include "mafnet/tensor_io.hpp"

namespace fs = std::filesystem;

namespace mafnet {

namespace {

std::pair<Tensor<float>, Tensor<float>> load_padded_pair(const std::string& rgb_path,
                                                         const std::string& thermal_path) {
    ImageU8 rgb_img, t_img;
    try {
        rgb_img = read_pnm(rgb_path);
        t_img = read_pnm(thermal_path);
    } catch (const IoError& e) {
        throw DataError(e.what());
    }
    if (rgb_img.channels != 3) throw DataError("rgb input must be a 3-channel P6 file");
    if (t_img.channels != 1) throw DataError("thermal input must be a 1-channel P5 file");
    if (rgb_img.height != t_img.height || rgb_img.width != t_img.width)
        throw DataError("rgb and thermal extents differ");
    Tensor<float> rgb = image_to_tensor(rgb_img);
    Tensor<float> thermal = image_to_tensor(t_img);
    const int Hp = (rgb_img.height + 63) / 64 * 64;
    const int Wp = (rgb_img.width + 63) / 64 * 64;
    return {pad_reflect(rgb, Hp, Wp), pad_reflect(thermal, Hp, Wp)};
}

}  // namespace

PredictResult predict_pair(const Checkpoint& ckpt, const std::string& rgb_path,
                           const std::string& thermal_path) {
    auto [rgb, thermal] = load_padded_pair(rgb_path, thermal_path);
    PredictResult res;
    res.density = model_forward(rgb, thermal, ckpt.config.model, ckpt.params);
    for (int i = 0; i < res.density.size(); ++i) res.count += res.density[i];
    return res;
}

int export_attention_maps(const Checkpoint& ckpt, const std::string& rgb_path,
                          const std::string& thermal_path, const std::string& out_dir) {
    auto [rgb, thermal] = load_padded_pair(rgb_path, thermal_path);
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    AttnCollector<float> collector;
    model_forward(rgb, thermal, ckpt.config.model, ckpt.params, &collector);
    for (const auto& e : collector.entries) {
        const std::string stem = "maf" + std::to_string(e.module) + "_block" +
                                 std::to_string(e.block) + "_" + e.branch + "_head" +
                                 std::to_string(e.head);
        save_tensor(e.weights, (fs::path(out_dir) / (stem + ".maft")).string());
        write_pnm(rows_to_pgm_heatmap(e.weights),
                  (fs::path(out_dir) / (stem + ".pgm")).string());
    }
    return static_cast<int>(collector.entries.size());
}

}  // namespace mafnet
