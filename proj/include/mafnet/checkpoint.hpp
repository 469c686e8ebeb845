#pragma once

// Checkpoint = directory holding manifest.json (config echo, parameter
// names and shapes, seed, iteration) plus one tensor file per parameter.
// Loading validates every shape against both the manifest and the config's
// parameter plan before accepting anything.

#include <string>

#include "mafnet/config.hpp"
#include "mafnet/model.hpp"

namespace mafnet {

struct Checkpoint {
    RunConfig config;
    ModelParams<float> params;
    int64_t iteration = 0;
};

void save_checkpoint(const std::string& dir, const RunConfig& cfg, ModelParams<float>& params,
                     int64_t iteration);

Checkpoint load_checkpoint(const std::string& dir);

}  // namespace mafnet
