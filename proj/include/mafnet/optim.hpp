#pragma once

// AdamW with decoupled weight decay, plus the linear-warmup schedule.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mafnet/tensor.hpp"

namespace mafnet {

struct OptimizerConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

struct OptimizerState {
    int64_t step = 0;
    std::map<std::string, std::vector<float>> m, v;  // same shapes as the parameters
};

struct Schedule {
    int warmup_iters = 0;  // W; 10% of max_iters by convention
    int max_iters = 300;
};

inline double lr_at(int t, const Schedule& sched, double lr_max) {
    if (sched.warmup_iters <= 0) return lr_max;
    return lr_max * std::min(1.0, static_cast<double>(t) / sched.warmup_iters);
}

// One update over an explicit (name, parameter) list; gradients arrive
// keyed by the same names. Aborts on any non-finite gradient, naming the
// parameter.
inline void adamw_step(const std::vector<std::pair<std::string, Tensor<float>*>>& params,
                       const GradientMap<float>& grads, OptimizerState& state,
                       const OptimizerConfig& cfg, double lr) {
    if (lr < 0.0) throw ContractError("adamw_step: negative learning rate");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (const auto& [name, param] : params) {
        const Tensor<float>& g = grads.at(name);
        if (g.size() != param->size())
            throw DimensionError("adamw_step: gradient size mismatch for " + name);
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(param->size(), 0.0f);
        if (v.empty()) v.assign(param->size(), 0.0f);
        std::vector<float> theta = param->values();
        for (int i = 0; i < param->size(); ++i) {
            const double gi = g[i];
            if (!std::isfinite(gi))
                throw NumericError("adamw_step: non-finite gradient in " + name);
            m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
            v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            theta[i] = static_cast<float>(
                theta[i] - lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                 cfg.weight_decay * theta[i]));
        }
        *param = Tensor<float>(param->shape(), std::move(theta));
    }
}

// Convenience over any parameter struct with visit_params.
template <typename S>
void adamw_step_over(S& params, const GradientMap<float>& grads, OptimizerState& state,
                     const OptimizerConfig& cfg, double lr) {
    std::vector<std::pair<std::string, Tensor<float>*>> list;
    visit_params(params, "", [&](const std::string& name, Tensor<float>& t) {
        list.emplace_back(name, &t);
    });
    adamw_step(list, grads, state, cfg, lr);
}

}  // namespace mafnet
