#pragma once

// The full two-stream network: five-stage convolutional backbones per
// modality, MAF modules embedded after the deep stages, and the multi-modal
// multi-scale aggregation (MMA) regression head producing a density map at
// 1/8 input resolution.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "mafnet/attention.hpp"
#include "mafnet/rng.hpp"
#include "mafnet/tensor.hpp"

namespace mafnet {

struct EncoderConfig {
    int num_maf_modules = 3;            // attached after the last N stages
    std::vector<int> patch_sizes{2, 1, 1};
    std::vector<int> maf_depths{2, 2, 2};
    int embed_dim = 64;
    int num_heads = 4;
    bool use_positional_embedding = false;
    int pos_max_tokens = 1024;  // capacity of the learned table when enabled
};

struct MmaConfig {
    int channels = 32;  // M, the common width after per-scale projection
};

struct ModelConfig {
    std::array<int, 5> stage_channels{8, 16, 32, 64, 64};
    std::array<int, 5> stage_convs{1, 1, 2, 2, 2};
    EncoderConfig encoder;
    MmaConfig mma;

    // 0-based backbone stage the given MAF module sits after.
    int maf_stage(int module) const { return 5 - encoder.num_maf_modules + module; }
};

inline ModelConfig toy_config() { return ModelConfig{}; }

inline ModelConfig paper_config() {
    ModelConfig c;
    c.stage_channels = {64, 128, 256, 512, 512};
    c.stage_convs = {2, 2, 4, 4, 4};
    c.encoder.embed_dim = 768;
    c.encoder.num_heads = 8;
    c.mma.channels = 128;
    return c;
}

inline void validate(const ModelConfig& c) {
    for (int ch : c.stage_channels)
        if (ch < 1) throw ContractError("stage channels must be positive");
    for (int n : c.stage_convs)
        if (n < 1) throw ContractError("stage conv counts must be positive");
    const auto& e = c.encoder;
    if (e.num_maf_modules < 1 || e.num_maf_modules > 4)
        throw ContractError("num_maf_modules must be in 1..4, got " +
                            std::to_string(e.num_maf_modules));
    if (static_cast<int>(e.patch_sizes.size()) != e.num_maf_modules ||
        static_cast<int>(e.maf_depths.size()) != e.num_maf_modules)
        throw ContractError("patch_sizes and maf_depths must list one entry per MAF module");
    for (int p : e.patch_sizes)
        if (p < 1) throw ContractError("patch sizes must be positive");
    for (int d : e.maf_depths)
        if (d < 1) throw ContractError("MAF depths must be >= 1");
    if (e.num_heads < 1 || e.embed_dim % e.num_heads != 0)
        throw ContractError("head count must divide embedding dimension");
    if (c.mma.channels < 1) throw ContractError("MMA channel width must be positive");
}

template <typename T>
struct ConvParams {
    Tensor<T> w, b;
};

template <typename T>
struct BackboneParams {
    std::vector<std::vector<ConvParams<T>>> stages;  // 5 stages
};

template <typename T>
struct MmaParams {
    std::vector<ConvParams<T>> scale_fuse;  // per scale: [M, 2C_s, 3, 3]
    ConvParams<T> dil1, dil2, dil3;         // [M, M, 3, 3]
    ConvParams<T> skip;                     // [3M, M, 1, 1]
    ConvParams<T> fuse;                     // [M, 3M, 3, 3]
    ConvParams<T> head;                     // [1, M, 1, 1]
};

template <typename T>
struct ModelParams {
    BackboneParams<T> rgb, thermal;
    std::vector<MafModuleParams<T>> maf;
    MmaParams<T> mma;
};

template <typename T>
struct FeaturePair {
    Tensor<T> rgb, thermal;  // equal shapes [C, h, w]
};

// --------------------------------------------------------------------------
// Parameter enumeration (order is fixed: it defines checkpoint layout).

template <typename T, typename Fn>
void visit_params(ConvParams<T>& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".w", p.w);
    fn(prefix + ".b", p.b);
}

template <typename T, typename Fn>
void visit_params(BackboneParams<T>& p, const std::string& prefix, Fn&& fn) {
    for (size_t s = 0; s < p.stages.size(); ++s)
        for (size_t c = 0; c < p.stages[s].size(); ++c)
            visit_params(p.stages[s][c],
                         prefix + ".s" + std::to_string(s) + ".c" + std::to_string(c), fn);
}

template <typename T, typename Fn>
void visit_params(MmaParams<T>& p, const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < p.scale_fuse.size(); ++i)
        visit_params(p.scale_fuse[i], prefix + ".scale" + std::to_string(i), fn);
    visit_params(p.dil1, prefix + ".dil1", fn);
    visit_params(p.dil2, prefix + ".dil2", fn);
    visit_params(p.dil3, prefix + ".dil3", fn);
    visit_params(p.skip, prefix + ".skip", fn);
    visit_params(p.fuse, prefix + ".fuse", fn);
    visit_params(p.head, prefix + ".head", fn);
}

template <typename T, typename Fn>
void visit_params(ModelParams<T>& p, const std::string& prefix, Fn&& fn) {
    const std::string base = prefix.empty() ? "" : prefix + ".";
    visit_params(p.rgb, base + "rgb", fn);
    visit_params(p.thermal, base + "t", fn);
    for (size_t m = 0; m < p.maf.size(); ++m)
        visit_params(p.maf[m], base + "maf" + std::to_string(m), fn);
    visit_params(p.mma, base + "mma", fn);
}

// --------------------------------------------------------------------------
// Construction. Convolutions draw from N(0, sqrt(2/fan_in)) with zero
// biases; attention projections from N(0, sqrt(2/(fan_in+fan_out))).
// A null rng yields zero-filled parameters (used for shape plans and
// checkpoint loading).

template <typename T>
ConvParams<T> make_conv(int cout, int cin, int k, Rng* rng, double gain = 1.0) {
    ConvParams<T> p;
    if (rng) {
        const double stddev = gain * std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
        std::vector<T> w(static_cast<size_t>(cout) * cin * k * k);
        for (auto& v : w) v = static_cast<T>(rng->normal(0.0, stddev));
        p.w = Tensor<T>({cout, cin, k, k}, std::move(w));
    } else {
        p.w = Tensor<T>({cout, cin, k, k});
    }
    p.b = Tensor<T>({cout});
    return p;
}

template <typename T>
ModelParams<T> build_model_params(const ModelConfig& cfg, Rng* rng) {
    validate(cfg);
    ModelParams<T> p;
    auto build_backbone = [&](int in_channels) {
        BackboneParams<T> bb;
        bb.stages.resize(5);
        int cin = in_channels;
        for (int s = 0; s < 5; ++s) {
            const int cout = cfg.stage_channels[s];
            for (int c = 0; c < cfg.stage_convs[s]; ++c) {
                bb.stages[s].push_back(make_conv<T>(cout, c == 0 ? cin : cout, 3, rng));
            }
            cin = cout;
        }
        return bb;
    };
    p.rgb = build_backbone(3);
    p.thermal = build_backbone(1);
    for (int m = 0; m < cfg.encoder.num_maf_modules; ++m) {
        const int stage = cfg.maf_stage(m);
        p.maf.push_back(make_maf_module_params<T>(
            cfg.stage_channels[stage], cfg.encoder.patch_sizes[m], cfg.encoder.embed_dim,
            cfg.encoder.num_heads, cfg.encoder.maf_depths[m],
            cfg.encoder.use_positional_embedding, cfg.encoder.pos_max_tokens, rng));
    }
    const int M = cfg.mma.channels;
    for (int scale = 0; scale < 3; ++scale)
        p.mma.scale_fuse.push_back(make_conv<T>(M, 2 * cfg.stage_channels[2 + scale], 3, rng));
    p.mma.dil1 = make_conv<T>(M, M, 3, rng);
    p.mma.dil2 = make_conv<T>(M, M, 3, rng);
    p.mma.dil3 = make_conv<T>(M, M, 3, rng);
    p.mma.skip = make_conv<T>(3 * M, M, 1, rng);
    p.mma.fuse = make_conv<T>(M, 3 * M, 3, rng);
    // The regression head starts flat and slightly positive (w = 0,
    // b = 0.1): a full-scale head under the final relu begins far from any
    // ground-truth map and gradient descent drives every cell negative,
    // where the relu gradient is zero for good. The flat start keeps all
    // cells alive while the head learns the density direction.
    p.mma.head = make_conv<T>(1, M, 1, nullptr);
    if (rng) p.mma.head.b = Tensor<T>::full({1}, T(0.1));
    return p;
}

struct ParamSpec {
    std::string name;
    Shape shape;
};

inline std::vector<ParamSpec> param_specs(const ModelConfig& cfg) {
    ModelParams<float> p = build_model_params<float>(cfg, nullptr);
    std::vector<ParamSpec> specs;
    visit_params(p, "", [&](const std::string& name, Tensor<float>& t) {
        specs.push_back({name, t.shape()});
    });
    return specs;
}

inline long long param_count(const ModelConfig& cfg) {
    long long total = 0;
    for (const auto& s : param_specs(cfg)) total += shape_numel(s.shape);
    return total;
}

// --------------------------------------------------------------------------
// Forward passes.

template <typename T>
Tensor<T> backbone_stage(const Tensor<T>& x, const std::vector<ConvParams<T>>& convs) {
    Tensor<T> h = x;
    for (const auto& c : convs) h = relu(conv2d(h, c.w, c.b, 1, 1, 1));
    return maxpool2d(h);
}

// Runs both backbones with MAF fusion at their attachment stages and emits
// the three feature pairs at 1/8, 1/16 and 1/32 of the input resolution.
template <typename T>
std::vector<FeaturePair<T>> encoder_forward(const Tensor<T>& rgb, const Tensor<T>& thermal,
                                            const ModelConfig& cfg, const ModelParams<T>& p,
                                            AttnCollector<T>* attn = nullptr) {
    if (rgb.rank() != 3 || rgb.shape()[0] != 3)
        throw DimensionError("encoder: rgb input must be [3,H,W], got " + shape_str(rgb.shape()));
    if (thermal.rank() != 3 || thermal.shape()[0] != 1)
        throw DimensionError("encoder: thermal input must be [1,H,W], got " +
                             shape_str(thermal.shape()));
    const int H = rgb.shape()[1], W = rgb.shape()[2];
    if (thermal.shape()[1] != H || thermal.shape()[2] != W)
        throw DimensionError("encoder: rgb " + shape_str(rgb.shape()) + " and thermal " +
                             shape_str(thermal.shape()) + " are not registered");
    if (H % 64 != 0 || W % 64 != 0)
        throw DimensionError("encoder: input extents must be divisible by 64, got " +
                             std::to_string(H) + "x" + std::to_string(W));
    // check patch divisibility at every attachment point before any compute
    for (int m = 0; m < cfg.encoder.num_maf_modules; ++m) {
        const int stage = cfg.maf_stage(m);
        const int h = H >> (stage + 1), w = W >> (stage + 1);
        const int P = cfg.encoder.patch_sizes[m];
        if (h % P != 0 || w % P != 0)
            throw DimensionError("encoder: feature map " + std::to_string(h) + "x" +
                                 std::to_string(w) + " at stage " + std::to_string(stage + 1) +
                                 " not divisible by patch size " + std::to_string(P));
    }

    Tensor<T> xr = reshape(rgb, {1, 3, H, W});
    Tensor<T> xt = reshape(thermal, {1, 1, H, W});
    std::vector<FeaturePair<T>> pairs;
    for (int s = 0; s < 5; ++s) {
        xr = backbone_stage(xr, p.rgb.stages[s]);
        xt = backbone_stage(xt, p.thermal.stages[s]);
        const int module = s - (5 - cfg.encoder.num_maf_modules);
        if (module >= 0) {
            const int C = cfg.stage_channels[s];
            const int h = H >> (s + 1), w = W >> (s + 1);
            if (attn) {
                attn->module = module;
                attn->block = -1;
            }
            auto [fr, ft] = maf_module(reshape(xr, {C, h, w}), reshape(xt, {C, h, w}),
                                       p.maf[module], attn);
            xr = reshape(fr, {1, C, h, w});
            xt = reshape(ft, {1, C, h, w});
        }
        if (s >= 2) {
            const int C = cfg.stage_channels[s];
            const int h = H >> (s + 1), w = W >> (s + 1);
            pairs.push_back({reshape(xr, {C, h, w}), reshape(xt, {C, h, w})});
        }
    }
    return pairs;
}

// Aggregates the three feature pairs into one density map at the finest
// (1/8) scale: per-scale channel concat + 3x3 conv + relu, upsample to the
// finest scale, sum, then three dilated 3x3 branches plus a 1x1 skip, a 3x3
// fusion conv and the 1x1 regression head under a final relu.
template <typename T>
Tensor<T> mma_forward(const std::vector<FeaturePair<T>>& pairs, const ModelConfig& cfg,
                      const ModelParams<T>& p) {
    if (pairs.size() != 3)
        throw DimensionError("mma: expected 3 feature pairs, got " + std::to_string(pairs.size()));
    std::vector<Tensor<T>> fused;
    for (int i = 0; i < 3; ++i) {
        const auto& fp = pairs[i];
        detail::require_equal_shape(fp.rgb, fp.thermal, "mma");
        const int C = fp.rgb.shape()[0], h = fp.rgb.shape()[1], w = fp.rgb.shape()[2];
        if (C != cfg.stage_channels[2 + i])
            throw DimensionError("mma: pair " + std::to_string(i) + " carries " +
                                 std::to_string(C) + " channels, config expects " +
                                 std::to_string(cfg.stage_channels[2 + i]));
        Tensor<T> cat = concat<T>({reshape(fp.rgb, {1, C, h, w}), reshape(fp.thermal, {1, C, h, w})}, 1);
        fused.push_back(relu(conv2d(cat, p.mma.scale_fuse[i].w, p.mma.scale_fuse[i].b, 1, 1, 1)));
    }
    const int h0 = fused[0].shape()[2], w0 = fused[0].shape()[3];
    if (fused[1].shape()[2] * 2 != h0 || fused[2].shape()[2] * 4 != h0)
        throw DimensionError("mma: feature pairs are not ordered fine to coarse");
    Tensor<T> acc = add(fused[0], upsample_bilinear(fused[1], h0, w0));
    acc = add(acc, upsample_bilinear(fused[2], h0, w0));

    Tensor<T> d1 = relu(conv2d(acc, p.mma.dil1.w, p.mma.dil1.b, 1, 1, 1));
    Tensor<T> d2 = relu(conv2d(acc, p.mma.dil2.w, p.mma.dil2.b, 1, 2, 2));
    Tensor<T> d3 = relu(conv2d(acc, p.mma.dil3.w, p.mma.dil3.b, 1, 3, 3));
    Tensor<T> skip = conv2d(acc, p.mma.skip.w, p.mma.skip.b, 1, 0, 1);
    Tensor<T> trunk = add(concat<T>({d1, d2, d3}, 1), skip);
    Tensor<T> mixed = relu(conv2d(trunk, p.mma.fuse.w, p.mma.fuse.b, 1, 1, 1));
    Tensor<T> density = relu(conv2d(mixed, p.mma.head.w, p.mma.head.b, 1, 0, 1));
    return reshape(density, {1, h0, w0});
}

// Full forward pass; the predicted crowd count is the sum of the output.
template <typename T>
Tensor<T> model_forward(const Tensor<T>& rgb, const Tensor<T>& thermal, const ModelConfig& cfg,
                        const ModelParams<T>& p, AttnCollector<T>* attn = nullptr) {
    return mma_forward(encoder_forward(rgb, thermal, cfg, p, attn), cfg, p);
}

}  // namespace mafnet
