#pragma once

// Run configuration: presets, JSON round trip, strict key validation.
// Unknown keys anywhere in a config file are errors.

#include <string>

#include <json.hpp>

#include "mafnet/dataset.hpp"
#include "mafnet/model.hpp"

namespace mafnet {

class UsageError : public std::runtime_error {
public:
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct RunConfig {
    std::string preset = "toy";  // toy | paper-scale
    uint64_t seed = 1;
    int batch_size = 4;
    int max_iters = 300;
    int warmup_iters = -1;  // -1 resolves to 10% of max_iters
    double lr_max = 5e-5;
    double weight_decay = 1e-4;
    int checkpoint_interval = 0;  // 0 = final checkpoint only
    bool augment = true;
    bool zero_rgb = false;      // zero the rgb stream at the model input
    bool zero_thermal = false;  // zero the thermal stream at the model input
    std::string eval_split = "all";
    std::string data_root;
    std::string out_dir;
    AugmentConfig aug;
    ModelConfig model;

    int resolved_warmup() const {
        return warmup_iters >= 0 ? warmup_iters : max_iters / 10;
    }
};

RunConfig preset_run_config(const std::string& name);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

}  // namespace mafnet
