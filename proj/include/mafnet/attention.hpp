#pragma once

// Attention-based cross-modal fusion: patch embedding, multi-head attention,
// intra-modality (IMA) and cross-modality (CMA) sub-modules, MAF blocks and
// the full MAF module with 2D recovery and skip connection.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mafnet/rng.hpp"
#include "mafnet/tensor.hpp"

namespace mafnet {

// Post-softmax attention matrices, tagged by where they came from. Used by
// the attention-map export and by tests auditing row normalization.
template <typename T>
struct AttnCollector {
    struct Entry {
        int module;
        int block;
        std::string branch;  // ima_r | ima_t | cma_r | cma_t | "" for bare calls
        int head;
        Tensor<T> weights;  // [query tokens, key tokens]
    };
    std::vector<Entry> entries;
    int module = -1;
    int block = -1;
    std::string branch;
};

template <typename T>
struct MhaParams {
    struct Head {
        Tensor<T> wq, wk, wv;  // each [D, d]
    };
    std::vector<Head> heads;
    Tensor<T> wo;  // [N_h * d, D]

    int head_count() const { return static_cast<int>(heads.size()); }
    int head_dim() const { return heads.empty() ? 0 : heads[0].wq.shape()[1]; }
    int embed_dim() const { return heads.empty() ? 0 : heads[0].wq.shape()[0]; }
};

template <typename T>
struct MafBlockParams {
    MhaParams<T> ima_r, ima_t, cma_r, cma_t;
};

template <typename T>
struct PatchEmbedParams {
    int patch = 1;        // P, in pixels of the feature map
    int in_channels = 0;  // C
    int dim = 0;          // D
    Tensor<T> proj;       // [P*P*C, D]
    Tensor<T> back;       // [D, P*P*C]
    bool use_positional_embedding = false;
    Tensor<T> pos;  // [N_max, D], present only when the toggle is on
};

template <typename T>
struct MafModuleParams {
    PatchEmbedParams<T> embed;
    std::vector<MafBlockParams<T>> blocks;  // length l_N >= 1

    int depth() const { return static_cast<int>(blocks.size()); }
};

// --------------------------------------------------------------------------
// Parameter enumeration in a fixed, name-sorted-stable order. The same
// visitors drive tracking, checkpoints, the optimizer and describe.

template <typename T, typename Fn>
void visit_params(MhaParams<T>& p, const std::string& prefix, Fn&& fn) {
    for (size_t h = 0; h < p.heads.size(); ++h) {
        const std::string hp = prefix + ".h" + std::to_string(h);
        fn(hp + ".wq", p.heads[h].wq);
        fn(hp + ".wk", p.heads[h].wk);
        fn(hp + ".wv", p.heads[h].wv);
    }
    fn(prefix + ".wo", p.wo);
}

template <typename T, typename Fn>
void visit_params(MafBlockParams<T>& p, const std::string& prefix, Fn&& fn) {
    visit_params(p.ima_r, prefix + ".ima_r", fn);
    visit_params(p.ima_t, prefix + ".ima_t", fn);
    visit_params(p.cma_r, prefix + ".cma_r", fn);
    visit_params(p.cma_t, prefix + ".cma_t", fn);
}

template <typename T, typename Fn>
void visit_params(PatchEmbedParams<T>& p, const std::string& prefix, Fn&& fn) {
    fn(prefix + ".proj", p.proj);
    fn(prefix + ".back", p.back);
    if (p.use_positional_embedding) fn(prefix + ".pos", p.pos);
}

template <typename T, typename Fn>
void visit_params(MafModuleParams<T>& p, const std::string& prefix, Fn&& fn) {
    visit_params(p.embed, prefix + ".embed", fn);
    for (size_t b = 0; b < p.blocks.size(); ++b)
        visit_params(p.blocks[b], prefix + ".block" + std::to_string(b), fn);
}

// Copy of a parameter struct whose tensors are registered as named leaves
// on the given tape; gradients come back under the same names.
template <typename S, typename T>
S tracked(const S& params, Tape<T>& tape, const std::string& prefix) {
    S copy = params;
    visit_params(copy, prefix, [&](const std::string& name, Tensor<T>& t) { t = tape.leaf(t, name); });
    return copy;
}

// --------------------------------------------------------------------------
// Initialization: zero-mean normal with std sqrt(2 / (fan_in + fan_out))
// keeps pre-softmax logits O(1). Zero-filled when rng is null (shape plans).
//
// The embedding projections additionally carry a 0.1 gain. The block
// aggregation multiplies two near-unit branches, so token magnitudes square
// with every block; starting the tokens well below 1 keeps the stacked
// modules finite in 32-bit mode, and the skip connection carries the signal
// until training scales the projections up.
inline constexpr double kEmbedInitGain = 0.1;

template <typename T>
Tensor<T> projection_init(const Shape& shape, int fan_in, int fan_out, Rng* rng,
                          double gain = 1.0) {
    if (!rng) return Tensor<T>(shape);
    const double stddev = gain * std::sqrt(2.0 / (fan_in + fan_out));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng->normal(0.0, stddev));
    return Tensor<T>(shape, std::move(v));
}

template <typename T>
MhaParams<T> make_mha_params(int embed_dim, int n_heads, Rng* rng) {
    if (n_heads < 1 || embed_dim % n_heads != 0)
        throw ContractError("head count " + std::to_string(n_heads) +
                            " must divide embedding dimension " + std::to_string(embed_dim));
    const int d = embed_dim / n_heads;
    MhaParams<T> p;
    p.heads.resize(n_heads);
    for (auto& h : p.heads) {
        h.wq = projection_init<T>({embed_dim, d}, embed_dim, d, rng);
        h.wk = projection_init<T>({embed_dim, d}, embed_dim, d, rng);
        h.wv = projection_init<T>({embed_dim, d}, embed_dim, d, rng);
    }
    p.wo = projection_init<T>({n_heads * d, embed_dim}, n_heads * d, embed_dim, rng);
    return p;
}

template <typename T>
MafBlockParams<T> make_maf_block_params(int embed_dim, int n_heads, Rng* rng) {
    MafBlockParams<T> p;
    p.ima_r = make_mha_params<T>(embed_dim, n_heads, rng);
    p.ima_t = make_mha_params<T>(embed_dim, n_heads, rng);
    p.cma_r = make_mha_params<T>(embed_dim, n_heads, rng);
    p.cma_t = make_mha_params<T>(embed_dim, n_heads, rng);
    return p;
}

template <typename T>
MafModuleParams<T> make_maf_module_params(int in_channels, int patch, int embed_dim, int n_heads,
                                          int depth, bool use_pos, int max_tokens, Rng* rng) {
    if (depth < 1) throw ContractError("MAF module depth must be >= 1");
    MafModuleParams<T> p;
    p.embed.patch = patch;
    p.embed.in_channels = in_channels;
    p.embed.dim = embed_dim;
    const int flat = patch * patch * in_channels;
    p.embed.proj = projection_init<T>({flat, embed_dim}, flat, embed_dim, rng, kEmbedInitGain);
    p.embed.back = projection_init<T>({embed_dim, flat}, embed_dim, flat, rng, kEmbedInitGain);
    p.embed.use_positional_embedding = use_pos;
    if (use_pos)
        p.embed.pos = projection_init<T>({max_tokens, embed_dim}, max_tokens, embed_dim, rng,
                                         kEmbedInitGain);
    for (int b = 0; b < depth; ++b)
        p.blocks.push_back(make_maf_block_params<T>(embed_dim, n_heads, rng));
    return p;
}

// --------------------------------------------------------------------------
// Operations.

// Tokenizes a [C,H,W] feature map into N = H*W/P^2 embeddings of length D.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& f, const PatchEmbedParams<T>& cfg) {
    if (f.rank() != 3 || f.shape()[0] != cfg.in_channels)
        throw DimensionError("patch_embed: feature map " + shape_str(f.shape()) +
                             " does not carry " + std::to_string(cfg.in_channels) + " channels");
    const int H = f.shape()[1], W = f.shape()[2], P = cfg.patch;
    if (H % P != 0 || W % P != 0)
        throw DimensionError("patch_embed: H=" + std::to_string(H) + " W=" + std::to_string(W) +
                             " not divisible by patch size P=" + std::to_string(P));
    Tensor<T> tokens = patchify(f, P);
    Tensor<T> z = matmul(tokens, cfg.proj);
    if (cfg.use_positional_embedding) {
        const int n = z.shape()[0];
        if (cfg.pos.rank() != 2 || cfg.pos.shape()[0] < n || cfg.pos.shape()[1] != cfg.dim)
            throw DimensionError("patch_embed: positional table " + shape_str(cfg.pos.shape()) +
                                 " too small for " + std::to_string(n) + " tokens");
        z = add(z, slice(cfg.pos, {0, 0}, {n, cfg.dim}));
    }
    return z;
}

// Scaled dot-product attention over N_h heads; queries from zq, keys and
// values from zkv; concatenated head outputs projected by W_O. No residual
// here.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& zq, const Tensor<T>& zkv, const MhaParams<T>& p,
                               AttnCollector<T>* attn = nullptr) {
    if (zq.rank() != 2 || zkv.rank() != 2 || zq.shape()[1] != zkv.shape()[1])
        throw DimensionError("multi_head_attention: embeddings " + shape_str(zq.shape()) +
                             " vs " + shape_str(zkv.shape()) + " disagree on D");
    const int D = zq.shape()[1];
    if (p.embed_dim() != D)
        throw DimensionError("multi_head_attention: parameters expect D=" +
                             std::to_string(p.embed_dim()) + ", embeddings have D=" +
                             std::to_string(D));
    const int d = p.head_dim();
    if (p.wo.shape()[0] != p.head_count() * d || p.wo.shape()[1] != D)
        throw DimensionError("multi_head_attention: output projection " +
                             shape_str(p.wo.shape()) + " inconsistent with " +
                             std::to_string(p.head_count()) + " heads of dim " +
                             std::to_string(d));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor<T>> outputs;
    for (int h = 0; h < p.head_count(); ++h) {
        Tensor<T> q = matmul(zq, p.heads[h].wq);
        Tensor<T> k = matmul(zkv, p.heads[h].wk);
        Tensor<T> v = matmul(zkv, p.heads[h].wv);
        Tensor<T> scores = scale(matmul(q, transpose(k, 0, 1)), inv_sqrt_d);
        Tensor<T> weights = softmax(scores, 1);
        if (attn)
            attn->entries.push_back({attn->module, attn->block, attn->branch, h,
                                     weights.detached()});
        outputs.push_back(matmul(weights, v));
    }
    return matmul(concat(outputs, 1), p.wo);
}

// Self-attention within one modality, plus residual.
template <typename T>
Tensor<T> ima(const Tensor<T>& z, const MhaParams<T>& p, AttnCollector<T>* attn = nullptr) {
    return add(multi_head_attention(z, z, p, attn), z);
}

// Cross-modality attention: the query comes from the opposite stream, keys,
// values and the residual come from the own stream.
template <typename T>
Tensor<T> cma(const Tensor<T>& z_self, const Tensor<T>& z_other, const MhaParams<T>& p,
              AttnCollector<T>* attn = nullptr) {
    if (z_self.shape() != z_other.shape())
        throw DimensionError("cma: token count mismatch " + shape_str(z_self.shape()) + " vs " +
                             shape_str(z_other.shape()));
    return add(multi_head_attention(z_other, z_self, p, attn), z_self);
}

// One fusion block. IMA and CMA branches both read the block inputs
// (parallel topology) and are aggregated per modality by element-wise
// product.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> maf_block(const Tensor<T>& z_r, const Tensor<T>& z_t,
                                          const MafBlockParams<T>& p,
                                          AttnCollector<T>* attn = nullptr) {
    detail::require_equal_shape(z_r, z_t, "maf_block");
    if (attn) attn->branch = "ima_r";
    Tensor<T> zri = ima(z_r, p.ima_r, attn);
    if (attn) attn->branch = "ima_t";
    Tensor<T> zti = ima(z_t, p.ima_t, attn);
    if (attn) attn->branch = "cma_r";
    Tensor<T> zrc = cma(z_r, z_t, p.cma_r, attn);
    if (attn) attn->branch = "cma_t";
    Tensor<T> ztc = cma(z_t, z_r, p.cma_t, attn);
    return {mul(zri, zrc), mul(zti, ztc)};
}

// Full MAF module: embed both streams, run the block stack, project back to
// patch space, reassemble the 2D maps and add the input feature maps.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> maf_module(const Tensor<T>& f_r, const Tensor<T>& f_t,
                                           const MafModuleParams<T>& p,
                                           AttnCollector<T>* attn = nullptr) {
    detail::require_equal_shape(f_r, f_t, "maf_module");
    const int C = f_r.shape()[0], H = f_r.shape()[1], W = f_r.shape()[2];
    Tensor<T> z_r = patch_embed(f_r, p.embed);
    Tensor<T> z_t = patch_embed(f_t, p.embed);
    for (size_t b = 0; b < p.blocks.size(); ++b) {
        if (attn) attn->block = static_cast<int>(b);
        std::tie(z_r, z_t) = maf_block(z_r, z_t, p.blocks[b], attn);
    }
    Tensor<T> out_r = add(unpatchify(matmul(z_r, p.embed.back), C, H, W, p.embed.patch), f_r);
    Tensor<T> out_t = add(unpatchify(matmul(z_t, p.embed.back), C, H, W, p.embed.patch), f_t);
    return {out_r, out_t};
}

}  // namespace mafnet
