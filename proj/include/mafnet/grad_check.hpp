#pragma once

// Central-difference gradient verification for the 64-bit mode of the
// engine. The loss function is re-evaluated with single coordinates
// perturbed by +/- eps; coordinates whose perturbation flips a relu sign or
// a maxpool argmax (detected through the kink probe) are excluded, since a
// finite difference across a kink says nothing about the subgradient.

#include <functional>
#include <string>
#include <vector>

#include "mafnet/rng.hpp"
#include "mafnet/tensor.hpp"

namespace mafnet {

struct ParamRef {
    std::string name;
    Tensor<double>* tensor;
};

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-5;
    // 0 checks every coordinate; otherwise at most this many per parameter,
    // sampled deterministically.
    int max_coords_per_param = 0;
    uint64_t coord_seed = 7;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_coord = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    size_t coords_checked = 0;
    size_t coords_skipped = 0;  // kink crossings excluded from the comparison
    double kink_margin = std::numeric_limits<double>::infinity();
    double tol = 0.0;
    bool passed = false;
};

// `loss_fn(tape)` must rebuild the scalar loss from the CURRENT values of
// the referenced parameters; when tape is non-null it must register exactly
// those tensors as named leaves (see tracked() helpers in the layer
// headers).
inline GradCheckReport grad_check(const std::vector<ParamRef>& params,
                                  const std::function<Tensor<double>(Tape<double>*)>& loss_fn,
                                  const GradCheckOptions& opt = {}) {
    GradCheckReport report;
    report.tol = opt.tol;

    Tape<double> tape;
    GradientMap<double> grads;
    {
        KinkProbe probe;
        ScopedKinkProbe scoped(&probe);
        Tensor<double> loss = loss_fn(&tape);
        grads = backward(loss, tape);
        report.kink_margin = probe.min_margin;
    }

    Rng coord_rng(opt.coord_seed);
    for (const ParamRef& p : params) {
        const Tensor<double>& g = grads.at(p.name);
        const int n = p.tensor->size();
        std::vector<int> coords;
        if (opt.max_coords_per_param <= 0 || n <= opt.max_coords_per_param) {
            coords.resize(n);
            for (int i = 0; i < n; ++i) coords[i] = i;
        } else {
            // sample without replacement via partial Fisher-Yates
            std::vector<int> all(n);
            for (int i = 0; i < n; ++i) all[i] = i;
            for (int i = 0; i < opt.max_coords_per_param; ++i) {
                int j = static_cast<int>(coord_rng.uniform_int(i, n - 1));
                std::swap(all[i], all[j]);
                coords.push_back(all[i]);
            }
        }

        const Tensor<double> saved = *p.tensor;
        for (int ci : coords) {
            const double v0 = saved[ci];
            KinkProbe probe_plus, probe_minus;
            double f_plus, f_minus;
            {
                *p.tensor = saved.with_value(ci, v0 + opt.eps);
                ScopedKinkProbe scoped(&probe_plus);
                f_plus = loss_fn(nullptr)[0];
            }
            {
                *p.tensor = saved.with_value(ci, v0 - opt.eps);
                ScopedKinkProbe scoped(&probe_minus);
                f_minus = loss_fn(nullptr)[0];
            }
            *p.tensor = saved;
            if (probe_plus.signature != probe_minus.signature) {
                report.coords_skipped++;
                continue;
            }
            const double fd = (f_plus - f_minus) / (2.0 * opt.eps);
            const double ad = g[ci];
            const double rel =
                std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1e-8});
            report.coords_checked++;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p.name;
                report.worst_coord = ci;
                report.worst_analytic = ad;
                report.worst_numeric = fd;
            }
        }
    }
    report.passed = report.coords_checked > 0 && report.max_rel_err < opt.tol;
    return report;
}

}  // namespace mafnet
