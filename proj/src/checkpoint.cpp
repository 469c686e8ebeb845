#include "mafnet/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "mafnet/tensor_io.hpp"

namespace fs = std::filesystem;

namespace mafnet {

void save_checkpoint(const std::string& dir, const RunConfig& cfg, ModelParams<float>& params,
                     int64_t iteration) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    nlohmann::json manifest;
    manifest["format"] = "mafnet-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = run_config_to_json(cfg);
    manifest["seed"] = cfg.seed;
    manifest["iteration"] = iteration;
    manifest["params"] = nlohmann::json::array();
    visit_params(params, "", [&](const std::string& name, Tensor<float>& t) {
        manifest["params"].push_back({{"name", name}, {"shape", t.shape()}});
        save_tensor(t, (fs::path(dir) / (name + ".maft")).string());
    });
    std::ofstream os((fs::path(dir) / "manifest.json").string());
    if (!os) throw IoError("cannot write checkpoint manifest in " + dir);
    os << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream is((fs::path(dir) / "manifest.json").string());
    if (!is) throw DataError("missing checkpoint manifest in " + dir);
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format", std::string()) != "mafnet-checkpoint" ||
        manifest.value("version", 0) != 1)
        throw DataError("unrecognized checkpoint format in " + dir);

    Checkpoint ckpt;
    try {
        ckpt.config = run_config_from_json(manifest.at("config"));
    } catch (const UsageError& e) {
        throw DataError(std::string("checkpoint config rejected: ") + e.what());
    }
    ckpt.iteration = manifest.value("iteration", 0);

    std::map<std::string, Shape> listed;
    for (const auto& entry : manifest.at("params"))
        listed[entry.at("name").get<std::string>()] = entry.at("shape").get<Shape>();

    ckpt.params = build_model_params<float>(ckpt.config.model, nullptr);
    size_t used = 0;
    visit_params(ckpt.params, "", [&](const std::string& name, Tensor<float>& t) {
        auto it = listed.find(name);
        if (it == listed.end())
            throw DataError("checkpoint misses parameter " + name);
        if (it->second != t.shape())
            throw DataError("checkpoint shape mismatch for " + name + ": manifest " +
                            shape_str(it->second) + " vs configured " + shape_str(t.shape()));
        Tensor<float> loaded;
        try {
            loaded = load_tensor((fs::path(dir) / (name + ".maft")).string());
        } catch (const IoError& e) {
            throw DataError(std::string("checkpoint tensor unreadable: ") + e.what());
        }
        if (loaded.shape() != t.shape())
            throw DataError("checkpoint tensor shape mismatch for " + name);
        t = std::move(loaded);
        ++used;
    });
    if (used != listed.size())
        throw DataError("checkpoint lists " + std::to_string(listed.size()) +
                        " parameters, the configured model has " + std::to_string(used));
    return ckpt;
}

}  // namespace mafnet
