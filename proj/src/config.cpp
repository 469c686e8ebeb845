#include "mafnet/config.hpp"

#include <fstream>
#include <set>

namespace mafnet {

namespace {

void require_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                  const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw UsageError("unknown config key '" + key + "' in " + where);
}

}  // namespace

RunConfig preset_run_config(const std::string& name) {
    RunConfig cfg;
    cfg.preset = name;
    if (name == "toy") {
        cfg.model = toy_config();
        cfg.batch_size = 4;
        cfg.aug.crop_size = 64;
    } else if (name == "paper-scale") {
        cfg.model = paper_config();
        cfg.batch_size = 16;
        cfg.aug.crop_size = 256;
    } else {
        throw UsageError("unknown preset '" + name + "' (expected toy or paper-scale)");
    }
    return cfg;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw UsageError("config root must be a JSON object");
    require_keys(j,
                 {"preset", "seed", "batch_size", "max_iters", "warmup_iters", "lr_max",
                  "weight_decay", "checkpoint_interval", "augment", "zero_rgb", "zero_thermal",
                  "eval_split", "data", "out", "encoder", "mma", "augment_cfg"},
                 "config root");
    RunConfig cfg = preset_run_config(j.value("preset", std::string("toy")));
    try {
        cfg.seed = j.value("seed", cfg.seed);
        cfg.batch_size = j.value("batch_size", cfg.batch_size);
        cfg.max_iters = j.value("max_iters", cfg.max_iters);
        cfg.warmup_iters = j.value("warmup_iters", cfg.warmup_iters);
        cfg.lr_max = j.value("lr_max", cfg.lr_max);
        cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
        cfg.checkpoint_interval = j.value("checkpoint_interval", cfg.checkpoint_interval);
        cfg.augment = j.value("augment", cfg.augment);
        cfg.zero_rgb = j.value("zero_rgb", cfg.zero_rgb);
        cfg.zero_thermal = j.value("zero_thermal", cfg.zero_thermal);
        cfg.eval_split = j.value("eval_split", cfg.eval_split);
        cfg.data_root = j.value("data", cfg.data_root);
        cfg.out_dir = j.value("out", cfg.out_dir);
        if (j.contains("encoder")) {
            const auto& e = j.at("encoder");
            require_keys(e,
                         {"num_maf_modules", "patch_sizes", "maf_depths", "embed_dim",
                          "num_heads", "use_positional_embedding", "pos_max_tokens"},
                         "encoder");
            auto& ec = cfg.model.encoder;
            ec.num_maf_modules = e.value("num_maf_modules", ec.num_maf_modules);
            if (e.contains("patch_sizes"))
                ec.patch_sizes = e.at("patch_sizes").get<std::vector<int>>();
            if (e.contains("maf_depths"))
                ec.maf_depths = e.at("maf_depths").get<std::vector<int>>();
            ec.embed_dim = e.value("embed_dim", ec.embed_dim);
            ec.num_heads = e.value("num_heads", ec.num_heads);
            ec.use_positional_embedding =
                e.value("use_positional_embedding", ec.use_positional_embedding);
            ec.pos_max_tokens = e.value("pos_max_tokens", ec.pos_max_tokens);
        }
        if (j.contains("mma")) {
            const auto& m = j.at("mma");
            require_keys(m, {"channels"}, "mma");
            cfg.model.mma.channels = m.value("channels", cfg.model.mma.channels);
        }
        if (j.contains("augment_cfg")) {
            const auto& a = j.at("augment_cfg");
            require_keys(a, {"crop_size", "hflip_prob", "rescale_range", "seed"}, "augment_cfg");
            cfg.aug.crop_size = a.value("crop_size", cfg.aug.crop_size);
            cfg.aug.hflip_prob = a.value("hflip_prob", cfg.aug.hflip_prob);
            if (a.contains("rescale_range")) {
                const auto r = a.at("rescale_range").get<std::vector<double>>();
                if (r.size() != 2) throw UsageError("rescale_range must be [min, max]");
                cfg.aug.rescale_min = r[0];
                cfg.aug.rescale_max = r[1];
            }
            cfg.aug.seed = a.value("seed", cfg.aug.seed);
        }
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("malformed config value: ") + e.what());
    }
    if (cfg.batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (cfg.max_iters < 0) throw UsageError("max_iters must be >= 0");
    if (cfg.aug.crop_size % 64 != 0)
        throw UsageError("crop_size must be divisible by 64 (model contract)");
    if (cfg.aug.rescale_min <= 0.0 || cfg.aug.rescale_min > cfg.aug.rescale_max)
        throw UsageError("rescale_range must be positive with min <= max");
    if (cfg.eval_split != "all" && cfg.eval_split != "bright" && cfg.eval_split != "dark")
        throw UsageError("eval_split must be all, bright or dark");
    try {
        validate(cfg.model);
    } catch (const ContractError& e) {
        throw UsageError(e.what());
    }
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw UsageError("cannot open config file: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("malformed config JSON: ") + e.what());
    }
    return run_config_from_json(j);
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["preset"] = cfg.preset;
    j["seed"] = cfg.seed;
    j["batch_size"] = cfg.batch_size;
    j["max_iters"] = cfg.max_iters;
    j["warmup_iters"] = cfg.warmup_iters;
    j["lr_max"] = cfg.lr_max;
    j["weight_decay"] = cfg.weight_decay;
    j["checkpoint_interval"] = cfg.checkpoint_interval;
    j["augment"] = cfg.augment;
    j["zero_rgb"] = cfg.zero_rgb;
    j["zero_thermal"] = cfg.zero_thermal;
    j["eval_split"] = cfg.eval_split;
    j["encoder"] = {{"num_maf_modules", cfg.model.encoder.num_maf_modules},
                    {"patch_sizes", cfg.model.encoder.patch_sizes},
                    {"maf_depths", cfg.model.encoder.maf_depths},
                    {"embed_dim", cfg.model.encoder.embed_dim},
                    {"num_heads", cfg.model.encoder.num_heads},
                    {"use_positional_embedding", cfg.model.encoder.use_positional_embedding},
                    {"pos_max_tokens", cfg.model.encoder.pos_max_tokens}};
    j["mma"] = {{"channels", cfg.model.mma.channels}};
    j["augment_cfg"] = {{"crop_size", cfg.aug.crop_size},
                        {"hflip_prob", cfg.aug.hflip_prob},
                        {"rescale_range", {cfg.aug.rescale_min, cfg.aug.rescale_max}},
                        {"seed", cfg.aug.seed}};
    return j;
}

}  // namespace mafnet
