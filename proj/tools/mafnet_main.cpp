// Command-line surface: synthesize data, train, evaluate, predict, export
// attention maps, run gradient checks, describe a configuration.
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric abort.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "mafnet/checkpoint.hpp"
#include "mafnet/config.hpp"
#include "mafnet/export.hpp"
#include "mafnet/grad_check.hpp"
#include "mafnet/image_io.hpp"
#include "mafnet/tensor_io.hpp"
#include "mafnet/train.hpp"

using namespace mafnet;

namespace {

Tensor<double> rand64(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>(shape, std::move(v));
}

bool report_line(const std::string& name, const GradCheckReport& rep) {
    std::printf("%-28s max rel err %.3e (checked %zu, skipped %zu) %s\n", name.c_str(),
                rep.max_rel_err, rep.coords_checked, rep.coords_skipped,
                rep.passed ? "ok" : "FAIL");
    return rep.passed;
}

bool gradcheck_tensor() {
    bool ok = true;
    GradCheckOptions opt;
    opt.eps = 1e-5;
    opt.tol = 1e-5;
    {
        Rng rng(1);
        Tensor<double> A = rand64(rng, {4, 5}), B = rand64(rng, {5, 3}), R = rand64(rng, {4, 3});
        auto loss = [&](Tape<double>* t) {
            auto a = t ? t->leaf(A, "a") : A;
            auto b = t ? t->leaf(B, "b") : B;
            return sum(mul(matmul(a, b), R));
        };
        ok &= report_line("matmul", grad_check({{"a", &A}, {"b", &B}}, loss, opt));
    }
    {
        Rng rng(2);
        Tensor<double> X = rand64(rng, {3, 7}), R = rand64(rng, {3, 7});
        auto loss = [&](Tape<double>* t) {
            return sum(mul(softmax(t ? t->leaf(X, "x") : X, 1), R));
        };
        ok &= report_line("softmax", grad_check({{"x", &X}}, loss, opt));
    }
    {
        Rng rng(3);
        Tensor<double> X = rand64(rng, {1, 2, 6, 6}), W = rand64(rng, {3, 2, 3, 3});
        Tensor<double> B = rand64(rng, {3}), R = rand64(rng, {1, 3, 6, 6});
        auto loss = [&](Tape<double>* t) {
            return sum(mul(conv2d(t ? t->leaf(X, "x") : X, t ? t->leaf(W, "w") : W,
                                  t ? t->leaf(B, "b") : B, 1, 2, 2),
                           R));
        };
        ok &= report_line("conv2d", grad_check({{"x", &X}, {"w", &W}, {"b", &B}}, loss, opt));
    }
    {
        Rng rng(4);
        Tensor<double> X = rand64(rng, {1, 2, 6, 6}), R = rand64(rng, {1, 2, 3, 3});
        auto loss = [&](Tape<double>* t) {
            return sum(mul(maxpool2d(t ? t->leaf(X, "x") : X), R));
        };
        ok &= report_line("maxpool2d", grad_check({{"x", &X}}, loss, opt));
    }
    {
        Rng rng(5);
        Tensor<double> X = rand64(rng, {1, 2, 3, 4}), R = rand64(rng, {1, 2, 9, 10});
        auto loss = [&](Tape<double>* t) {
            return sum(mul(upsample_bilinear(t ? t->leaf(X, "x") : X, 9, 10), R));
        };
        ok &= report_line("upsample_bilinear", grad_check({{"x", &X}}, loss, opt));
    }
    {
        Rng rng(6);
        Tensor<double> X = rand64(rng, {4, 6}), R = rand64(rng, {4, 6});
        auto loss = [&](Tape<double>* t) {
            auto x = t ? t->leaf(X, "x") : X;
            return sum(mul(relu(add(mul(x, x), scale(x, -0.3))), R));
        };
        ok &= report_line("elementwise+relu", grad_check({{"x", &X}}, loss, opt));
    }
    return ok;
}

bool gradcheck_attention() {
    GradCheckOptions opt;
    opt.eps = 1e-5;
    opt.tol = 1e-5;
    Rng rng(7);
    MafBlockParams<double> bp = make_maf_block_params<double>(8, 2, &rng);
    Tensor<double> zr = rand64(rng, {4, 8}), zt = rand64(rng, {4, 8});
    Tensor<double> r1 = rand64(rng, {4, 8}), r2 = rand64(rng, {4, 8});
    std::vector<ParamRef> refs;
    visit_params(bp, "blk", [&](const std::string& n, Tensor<double>& t) {
        refs.push_back({n, &t});
    });
    auto loss = [&](Tape<double>* tape) {
        MafBlockParams<double> p = tape ? tracked(bp, *tape, "blk") : bp;
        auto [or_, ot_] = maf_block(zr, zt, p);
        return add(sum(mul(or_, r1)), sum(mul(ot_, r2)));
    };
    return report_line("maf_block", grad_check(refs, loss, opt));
}

bool gradcheck_model(int coords) {
    Rng rng(8);
    ModelConfig cfg = toy_config();
    auto mp = build_model_params<double>(cfg, &rng);
    // re-randomize the zero-initialized head so upstream gradients are live
    {
        Rng head_rng(99);
        mp.mma.head = make_conv<double>(1, cfg.mma.channels, 1, &head_rng);
    }
    Tensor<double> rgb = rand64(rng, {3, 64, 64});
    Tensor<double> t = rand64(rng, {1, 64, 64});
    Tensor<double> readout = rand64(rng, {1, 8, 8});
    std::vector<ParamRef> refs;
    visit_params(mp, "", [&](const std::string& n, Tensor<double>& p) { refs.push_back({n, &p}); });
    // readout scaled so noise-level gradients sit far under the 1e-8
    // relative-error floor; see the gradient-check notes in the tests
    auto loss = [&](Tape<double>* tape) {
        ModelParams<double> p = tape ? tracked(mp, *tape, "") : mp;
        Tensor<double> d = model_forward(rgb, t, cfg, p);
        Tensor<double> diff = sub(d, readout);
        return scale(sum(mul(diff, diff)), 0.0005 / diff.size());
    };
    GradCheckOptions opt;
    opt.eps = 1e-4;
    opt.tol = 1e-4;
    opt.max_coords_per_param = coords;
    return report_line("model (toy, 64x64)", grad_check(refs, loss, opt));
}

int dispatch(int argc, char** argv) {
    CLI::App app{"RGB-T crowd counting: two-stream encoder with attention fusion"};
    app.require_subcommand(1);

    auto* synth = app.add_subcommand("synth", "render a synthetic RGB-T dataset");
    SynthConfig synth_cfg;
    std::string synth_out;
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_option("--pairs", synth_cfg.pairs, "number of image pairs")->required();
    synth->add_option("--size", synth_cfg.size, "square image extent (multiple of 64)");
    synth->add_option("--seed", synth_cfg.seed, "generator seed");
    synth->add_option("--count-min", synth_cfg.count_min, "minimum heads per image");
    synth->add_option("--count-max", synth_cfg.count_max, "maximum heads per image");
    synth->add_option("--darkness", synth_cfg.darkness_prob, "probability of a dark RGB frame");
    synth->add_option("--crossover", synth_cfg.crossover_prob,
                      "probability of collapsed thermal contrast");

    auto* train = app.add_subcommand("train", "train a model");
    std::string train_config, train_data, train_out;
    train->add_option("--config", train_config, "JSON run configuration")->required();
    train->add_option("--data", train_data, "dataset root");
    train->add_option("--out", train_out, "output directory");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_split = "all", eval_report;
    eval->add_option("--ckpt", eval_ckpt, "checkpoint directory")->required();
    eval->add_option("--data", eval_data, "dataset root")->required();
    eval->add_option("--split", eval_split, "all | bright | dark");
    eval->add_option("--report", eval_report, "metrics report JSON path");

    auto* predict = app.add_subcommand("predict", "predict a density map for one pair");
    std::string pr_ckpt, pr_rgb, pr_thermal, pr_density, pr_pgm;
    predict->add_option("--ckpt", pr_ckpt, "checkpoint directory")->required();
    predict->add_option("--rgb", pr_rgb, "RGB image (P6 .ppm)")->required();
    predict->add_option("--thermal", pr_thermal, "thermal image (P5 .pgm)")->required();
    predict->add_option("--out-density", pr_density, "output density tensor")->required();
    predict->add_option("--out-pgm", pr_pgm, "optional 8-bit preview");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    std::string gc_module = "all";
    int gc_coords = 2;
    gradcheck->add_option("--module", gc_module, "tensor | attention | model | all")
        ->check(CLI::IsMember({"tensor", "attention", "model", "all"}));
    gradcheck->add_option("--coords", gc_coords, "sampled coordinates per parameter (model)");

    auto* attn = app.add_subcommand("attn-maps", "export post-softmax attention matrices");
    std::string am_ckpt, am_rgb, am_thermal, am_out;
    attn->add_option("--ckpt", am_ckpt, "checkpoint directory")->required();
    attn->add_option("--rgb", am_rgb, "RGB image")->required();
    attn->add_option("--thermal", am_thermal, "thermal image")->required();
    attn->add_option("--out", am_out, "output directory")->required();

    auto* describe = app.add_subcommand("describe", "parameter inventory for a configuration");
    std::string d_config;
    describe->add_option("--config", d_config, "JSON run configuration")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    if (synth->parsed()) {
        synthesize(synth_cfg, synth_out);
        std::printf("wrote %d pairs under %s\n", synth_cfg.pairs, synth_out.c_str());
        return 0;
    }
    if (train->parsed()) {
        RunConfig cfg = load_run_config(train_config);
        if (!train_data.empty()) cfg.data_root = train_data;
        if (!train_out.empty()) cfg.out_dir = train_out;
        if (cfg.data_root.empty() || cfg.out_dir.empty())
            throw UsageError("train needs --data and --out (or data/out keys in the config)");
        TrainResult res = run_train(cfg);
        std::printf("trained %d iterations, final checkpoint %s\n", cfg.max_iters,
                    res.final_checkpoint.c_str());
        if (!res.losses.empty())
            std::printf("loss: first %.6f last %.6f\n", res.losses.front(), res.losses.back());
        return 0;
    }
    if (eval->parsed()) {
        Checkpoint ckpt = load_checkpoint(eval_ckpt);
        EvalReport report = run_evaluate(ckpt, eval_data, eval_split);
        std::printf("split %s over %d images\n", report.split.c_str(),
                    report.metrics.n_images);
        std::printf("mae %.4f rmse %.4f game0 %.4f game1 %.4f game2 %.4f game3 %.4f\n",
                    report.metrics.mae, report.metrics.rmse, report.metrics.game[0],
                    report.metrics.game[1], report.metrics.game[2], report.metrics.game[3]);
        if (!eval_report.empty()) write_report_json(report, eval_report);
        return 0;
    }
    if (predict->parsed()) {
        Checkpoint ckpt = load_checkpoint(pr_ckpt);
        PredictResult res = predict_pair(ckpt, pr_rgb, pr_thermal);
        save_tensor(res.density, pr_density);
        if (!pr_pgm.empty()) write_pnm(map_to_pgm_preview(res.density), pr_pgm);
        std::printf("predicted count %.3f (density %dx%d)\n", res.count,
                    res.density.shape()[1], res.density.shape()[2]);
        return 0;
    }
    if (gradcheck->parsed()) {
        bool ok = true;
        if (gc_module == "tensor" || gc_module == "all") ok &= gradcheck_tensor();
        if (gc_module == "attention" || gc_module == "all") ok &= gradcheck_attention();
        if (gc_module == "model" || gc_module == "all") ok &= gradcheck_model(gc_coords);
        if (!ok) throw NumericError("gradient check failed");
        return 0;
    }
    if (attn->parsed()) {
        Checkpoint ckpt = load_checkpoint(am_ckpt);
        const int n = export_attention_maps(ckpt, am_rgb, am_thermal, am_out);
        std::printf("exported %d attention matrices to %s\n", n, am_out.c_str());
        return 0;
    }
    if (describe->parsed()) {
        RunConfig cfg = load_run_config(d_config);
        long long total = 0;
        for (const auto& spec : param_specs(cfg.model)) {
            std::printf("%-28s %s  %d\n", spec.name.c_str(), shape_str(spec.shape).c_str(),
                        shape_numel(spec.shape));
            total += shape_numel(spec.shape);
        }
        std::printf("total parameters: %lld\n", total);
        return 0;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return dispatch(argc, argv);
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        // data, annotation, IO and dimension failures all stem from inputs
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    }
}
