#include "mafnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <cstdio>
#include <fstream>

#include "mafnet/optim.hpp"
#include "mafnet/tensor_io.hpp"

namespace fs = std::filesystem;

namespace mafnet {

Tensor<float> density_target(const AnnotatedPair& pair) {
    DensityMap full = generate_density(pair.annotation, pair.height(), pair.width());
    DensityMap coarse = downsample_density(full, 8);
    return cast<float>(coarse.grid);
}

namespace {

constexpr uint64_t kOrderStream = 0x4f52444552ull;  // batch-order shuffles
constexpr uint64_t kAugStream = 0x41554full;        // per-sample augmentation

// Deterministic epoch order: Fisher-Yates keyed by (seed, epoch).
std::vector<int> epoch_order(uint64_t seed, int epoch, int n) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    Rng rng = Rng(seed).fork(kOrderStream, static_cast<uint64_t>(epoch));
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(rng.uniform_int(0, i));
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

Tensor<float> zeros_like_input(const Tensor<float>& t) { return Tensor<float>(t.shape()); }

}  // namespace

TrainResult run_train(const RunConfig& cfg) {
    if (cfg.out_dir.empty()) throw UsageError("train: output directory not set");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);

    std::vector<AnnotatedPair> dataset = load_dataset(cfg.data_root);
    if (dataset.empty() && cfg.max_iters > 0)
        throw DataError("train: no samples under " + cfg.data_root);

    Rng init_rng(cfg.seed);
    ModelParams<float> params = build_model_params<float>(cfg.model, &init_rng);
    OptimizerConfig opt_cfg;
    opt_cfg.weight_decay = cfg.weight_decay;
    OptimizerState opt_state;
    Schedule sched{cfg.resolved_warmup(), cfg.max_iters};
    const uint64_t aug_seed = cfg.aug.seed != 0 ? cfg.aug.seed : cfg.seed;

    std::ofstream log((fs::path(cfg.out_dir) / "loss_log.csv").string());
    if (!log) throw IoError("train: cannot write loss log under " + cfg.out_dir);
    log << "iteration,lr,loss\n";
    log.precision(17);

    TrainResult result;
    int epoch = 0, cursor = 0;
    std::vector<int> order = dataset.empty() ? std::vector<int>{}
                                             : epoch_order(cfg.seed, epoch, dataset.size());

    auto checkpoint_to = [&](const std::string& name, int64_t iteration) {
        const std::string dir = (fs::path(cfg.out_dir) / name).string();
        save_checkpoint(dir, cfg, params, iteration);
        return dir;
    };

    for (int t = 0; t < cfg.max_iters; ++t) {
        Tape<float> tape;
        ModelParams<float> live = tracked(params, tape, "");
        Tensor<float> batch_loss;
        try {
            for (int b = 0; b < cfg.batch_size; ++b) {
                if (cursor >= static_cast<int>(order.size())) {
                    cursor = 0;
                    ++epoch;
                    order = epoch_order(cfg.seed, epoch, dataset.size());
                }
                const int sample_index = order[cursor++];
                const AnnotatedPair& raw = dataset[sample_index];
                AnnotatedPair sample;
                if (cfg.augment) {
                    Rng aug_rng = Rng(aug_seed).fork(kAugStream, static_cast<uint64_t>(epoch),
                                                     static_cast<uint64_t>(sample_index));
                    sample = augment(raw, cfg.aug, aug_rng);
                } else {
                    sample = raw;
                }
                Tensor<float> gt = density_target(sample);
                Tensor<float> rgb_in = cfg.zero_rgb ? zeros_like_input(sample.rgb) : sample.rgb;
                Tensor<float> t_in =
                    cfg.zero_thermal ? zeros_like_input(sample.thermal) : sample.thermal;
                Tensor<float> pred = model_forward(rgb_in, t_in, cfg.model, live);
                Tensor<float> diff = sub(pred, gt);
                Tensor<float> sq = sum(mul(diff, diff));
                batch_loss = b == 0 ? sq : add(batch_loss, sq);
            }
        } catch (const NumericError& e) {
            // diverged parameters overflow inside the forward pass; they are
            // the last committed finite state, so save them before aborting
            checkpoint_to("ckpt_abort", t);
            throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(t) +
                               "; last good state saved to ckpt_abort");
        }
        Tensor<float> loss = scale(batch_loss, 1.0 / cfg.batch_size);
        const double loss_value = loss[0];
        if (!std::isfinite(loss_value)) {
            checkpoint_to("ckpt_abort", t);
            throw NumericError("train: non-finite loss at iteration " + std::to_string(t) +
                               "; last good state saved to ckpt_abort");
        }
        GradientMap<float> grads = backward(loss, tape);
        const double lr = lr_at(t, sched, cfg.lr_max);
        try {
            adamw_step_over(params, grads, opt_state, opt_cfg, lr);
        } catch (const NumericError& e) {
            checkpoint_to("ckpt_abort", t);
            throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(t) +
                               "; last good state saved to ckpt_abort");
        }
        log << t << "," << lr << "," << loss_value << "\n";
        result.losses.push_back(loss_value);
        if (cfg.checkpoint_interval > 0 && (t + 1) % cfg.checkpoint_interval == 0 &&
            t + 1 < cfg.max_iters) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06d", t + 1);
            checkpoint_to(name, t + 1);
        }
    }
    result.final_checkpoint = checkpoint_to("ckpt_final", cfg.max_iters);
    return result;
}

EvalReport run_evaluate(const Checkpoint& ckpt, const std::string& data_root,
                        const std::string& split) {
    if (split != "all" && split != "bright" && split != "dark")
        throw UsageError("evaluate: split must be all, bright or dark");
    std::vector<AnnotatedPair> dataset = load_dataset(data_root);
    std::vector<const AnnotatedPair*> selected;
    for (const auto& pair : dataset) {
        if (split == "all" || illumination_name(pair.illumination) == split)
            selected.push_back(&pair);
    }
    if (selected.empty()) throw DataError("evaluate: empty split '" + split + "'");

    EvalReport report;
    report.split = split;
    std::vector<DensityMap> preds, gts;
    for (const AnnotatedPair* pair : selected) {
        const int H = pair->height(), W = pair->width();
        const int Hp = (H + 63) / 64 * 64, Wp = (W + 63) / 64 * 64;
        Tensor<float> rgb = pad_reflect(pair->rgb, Hp, Wp);
        Tensor<float> thermal = pad_reflect(pair->thermal, Hp, Wp);
        Tensor<float> pred = model_forward(rgb, thermal, ckpt.config.model, ckpt.params);
        DensityMap pred_map{cast<double>(pred), 1.0 / 8};
        DensityMap gt_map = downsample_density(generate_density(pair->annotation, Hp, Wp), 8);
        EvalRecord rec;
        rec.id = pair->id;
        rec.pred_count = density_sum(pred_map);
        rec.gt_count = density_sum(gt_map);
        rec.pad_h = Hp - H;
        rec.pad_w = Wp - W;
        report.per_image.push_back(rec);
        preds.push_back(std::move(pred_map));
        gts.push_back(std::move(gt_map));
    }
    report.metrics = compute_metrics(preds, gts);
    return report;
}

void write_report_json(const EvalReport& report, const std::string& path) {
    nlohmann::json j;
    j["mae"] = report.metrics.mae;
    j["rmse"] = report.metrics.rmse;
    j["game0"] = report.metrics.game[0];
    j["game1"] = report.metrics.game[1];
    j["game2"] = report.metrics.game[2];
    j["game3"] = report.metrics.game[3];
    j["n_images"] = report.metrics.n_images;
    j["split"] = report.split;
    j["per_image"] = nlohmann::json::array();
    for (const auto& rec : report.per_image)
        j["per_image"].push_back({{"id", rec.id},
                                  {"pred_count", rec.pred_count},
                                  {"gt_count", rec.gt_count},
                                  {"pad", {rec.pad_h, rec.pad_w}}});
    std::ofstream os(path);
    if (!os) throw IoError("cannot write report: " + path);
    os << j.dump(2) << "\n";
}

}  // namespace mafnet
