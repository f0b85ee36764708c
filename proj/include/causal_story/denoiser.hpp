#pragma once

// Conditional noise predictor eps(x_t, t, memory).
//
// The condition path runs one masked self-attention over the memory tokens
// (the local causal attention), keeps the rows of the current caption block,
// passes them through the optional adapter and exposes them as keys/values to
// a cross-attention inside every residual block of the image path.
//
// The image path works on 4x4 patch tokens. Each residual block mixes tokens
// spatially with a learned token-to-token matrix (a full-receptive-field
// convolution over the patch grid), cross-attends to the condition, and
// applies a per-token MLP (1x1 convolutions). Residual output projections
// start at zero.

#include <set>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "encoder.hpp"
#include "layers.hpp"
#include "lcam.hpp"
#include "param_store.hpp"
#include "schedule.hpp"

namespace causal_story {

struct DenoiserConfig {
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t patch = 4;
    std::size_t d_model = 64;
    std::size_t n_blocks = 2;
    std::size_t n_cond_heads = 4;
    std::size_t mlp_ratio = 2;
    bool adapter_enabled = false;
    std::size_t adapter_bottleneck = 8;

    std::size_t n_tokens() const { return (height / patch) * (width / patch); }
    std::size_t token_dim() const { return channels * patch * patch; }

    void validate() const {
        if (n_cond_heads == 0 || d_model % n_cond_heads != 0)
            throw ConfigError("model.d_model must be divisible by model.n_cond_heads");
        if (height % patch != 0 || width % patch != 0) throw ConfigError("model image must be divisible by the patch size");
        if (n_blocks == 0) throw ConfigError("model.n_blocks must be >= 1");
        if (d_model % 2 != 0) throw ConfigError("model.d_model must be even");
        if (adapter_enabled && adapter_bottleneck == 0) throw ConfigError("model.adapter_bottleneck must be >= 1");
    }
};

inline std::string block_prefix(std::size_t i) { return "den.blk" + std::to_string(i); }

inline void init_adapter_params(ParamStore& ps, const DenoiserConfig& c, Rng& rng, double stddev) {
    init_linear(ps, "adapter.down", c.d_model, c.adapter_bottleneck, stddev, rng);
    init_linear(ps, "adapter.up", c.adapter_bottleneck, c.d_model, stddev, rng, true);
}

inline void init_denoiser_params(ParamStore& ps, const DenoiserConfig& c, Rng& rng, double stddev) {
    const std::size_t d = c.d_model, n = c.n_tokens(), td = c.token_dim();
    init_linear(ps, "den.in", td, d, stddev, rng);
    init_normal(ps, "den.pos", {n, d}, stddev, rng);
    init_linear(ps, "den.time1", d, d, stddev, rng);
    init_linear(ps, "den.time2", d, d, stddev, rng);

    init_layer_norm(ps, "den.lcam.ln", d);
    init_normal(ps, "den.lcam.wq", {d, d}, stddev, rng);
    init_normal(ps, "den.lcam.wk", {d, d}, stddev, rng);
    init_normal(ps, "den.lcam.wv", {d, d}, stddev, rng);
    init_constant(ps, "den.lcam.wo", {d, d}, 0.0);

    for (std::size_t b = 0; b < c.n_blocks; ++b) {
        const auto p = block_prefix(b);
        init_linear(ps, p + ".time", d, d, stddev, rng);
        init_linear(ps, p + ".cond", d, d, stddev, rng);
        init_layer_norm(ps, p + ".ln_mix", d);
        init_constant(ps, p + ".mix", {n, n}, 0.0);
        init_layer_norm(ps, p + ".ln_x", d);
        init_normal(ps, p + ".xattn.wq", {d, d}, stddev, rng);
        init_normal(ps, p + ".xattn.wk", {d, d}, stddev, rng);
        init_normal(ps, p + ".xattn.wv", {d, d}, stddev, rng);
        init_constant(ps, p + ".xattn.wo", {d, d}, 0.0);
        init_layer_norm(ps, p + ".ln_mlp", d);
        init_linear(ps, p + ".mlp1", d, c.mlp_ratio * d, stddev, rng);
        init_linear(ps, p + ".mlp2", c.mlp_ratio * d, d, stddev, rng, true);
    }
    init_layer_norm(ps, "den.out_ln", d);
    init_linear(ps, "den.out", d, td, stddev, rng, true);
    init_constant(ps, "den.skip", {td, td}, 0.0);
    if (c.adapter_enabled) init_adapter_params(ps, c, rng, stddev);
}

/// Residual bottleneck on the condition stream.
struct AdapterParams {
    Tensor down_w, down_b, up_w, up_b;

    static AdapterParams from(const ParamStore& ps) {
        return {ps.at("adapter.down.w"), ps.at("adapter.down.b"), ps.at("adapter.up.w"), ps.at("adapter.up.b")};
    }
};

/// out = in + up(silu(down(in))).
inline Tensor adapter_apply(const Tensor& features, const AdapterParams& a) {
    if (features.rank() != 2 || features.cols() != a.down_w.dim(0))
        throw ContractError("adapter: feature width " + std::to_string(features.cols()) + " vs adapter input " +
                            std::to_string(a.down_w.dim(0)));
    Tensor hidden = silu(add_row(matmul(features, a.down_w), a.down_b));
    return add(features, add_row(matmul(hidden, a.up_w), a.up_b));
}

/// Causally masked self-attention over the memory; returns the updated rows of
/// the current caption block (after the adapter, when present).
inline Tensor condition_context(const ConditionMemory& memory, const MaskMatrix& mask, const ParamStore& ps,
                                const DenoiserConfig& cfg) {
    Tensor m = memory.tokens();
    if (mask.n_rows() != m.rows() || mask.block_sizes() != memory.block_sizes())
        throw ContractError("mask blocks do not match the condition memory");
    if (m.cols() != cfg.d_model) throw DimensionError("memory width differs from model.d_model");
    Tensor h = layer_norm(m, ps, "den.lcam.ln");
    Tensor a = masked_attention({matmul(h, ps.at("den.lcam.wq")), matmul(h, ps.at("den.lcam.wk")),
                                 matmul(h, ps.at("den.lcam.wv")), cfg.n_cond_heads},
                                mask);
    Tensor updated = add(m, matmul(a, ps.at("den.lcam.wo")));
    const std::size_t cur = memory.current_caption_block.rows();
    Tensor ctx = slice_rows(updated, m.rows() - cur, m.rows());
    if (cfg.adapter_enabled) ctx = adapter_apply(ctx, AdapterParams::from(ps));
    return ctx;
}

/// Noise prediction for x_t [C, H, W] given a prepared condition context.
/// The network output v is mapped to eps = sqrt(1 - abar_t) x_t + sqrt(abar_t) v,
/// so near t = T the prediction is dominated by the exact term.
inline Tensor predict_noise(const Tensor& x_t, int t, const Tensor& context, const ParamStore& ps,
                            const DenoiserConfig& cfg, const DiffusionSchedule& sched) {
    if (x_t.shape() != Shape{cfg.channels, cfg.height, cfg.width})
        throw ContractError("denoise: x_t shape " + detail::shape_str(x_t.shape()) + " does not match model config");
    const std::size_t n = cfg.n_tokens(), td = cfg.token_dim(), d = cfg.d_model;
    const auto idx = patch_index(cfg.channels, cfg.height, cfg.width, cfg.patch);
    Tensor tokens = gather(x_t, idx, {n, td});

    Tensor x = add(linear(tokens, ps, "den.in"), ps.at("den.pos"));
    Tensor temb(Shape{1, d}, timestep_embedding(t, d));
    temb = linear(silu(linear(temb, ps, "den.time1")), ps, "den.time2");

    const std::size_t nc = context.rows();
    Tensor cond_mean = matmul(Tensor(Shape{1, nc}, 1.0 / static_cast<double>(nc)), context);

    for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
        const auto p = block_prefix(b);
        x = add_row(x, add(linear(temb, ps, p + ".time"), linear(cond_mean, ps, p + ".cond")));
        x = add(x, matmul(ps.at(p + ".mix"), layer_norm(x, ps, p + ".ln_mix")));
        Tensor h = layer_norm(x, ps, p + ".ln_x");
        Tensor a = dense_attention({matmul(h, ps.at(p + ".xattn.wq")), matmul(context, ps.at(p + ".xattn.wk")),
                                    matmul(context, ps.at(p + ".xattn.wv")), cfg.n_cond_heads});
        x = add(x, matmul(a, ps.at(p + ".xattn.wo")));
        h = layer_norm(x, ps, p + ".ln_mlp");
        x = add(x, linear(silu(linear(h, ps, p + ".mlp1")), ps, p + ".mlp2"));
    }
    Tensor v = add(linear(layer_norm(x, ps, "den.out_ln"), ps, "den.out"), matmul(tokens, ps.at("den.skip")));
    const double abar = sched.alpha_bar(t);
    Tensor out = add(scale(tokens, std::sqrt(1.0 - abar)), scale(v, std::sqrt(abar)));
    return gather(out, inverse_permutation(idx), x_t.shape());
}

/// eps_theta(x_t, t, memory) under the given attention mask.
inline Tensor denoise(const Tensor& x_t, int t, const ConditionMemory& memory, const MaskMatrix& mask, const ParamStore& ps,
                      const DenoiserConfig& cfg, const DiffusionSchedule& sched) {
    return predict_noise(x_t, t, condition_context(memory, mask, ps, cfg), ps, cfg, sched);
}

enum class TrainMode { Full, AdapterOnly };

inline std::set<std::string> trainable_names(const ParamStore& ps, TrainMode mode) {
    std::set<std::string> out;
    for (const auto& name : ps.names())
        if (mode == TrainMode::Full || name.rfind("adapter.", 0) == 0) out.insert(name);
    if (mode == TrainMode::AdapterOnly && out.empty())
        throw ConfigError("adapter-only training requested but the model has no adapter");
    return out;
}

}  // namespace causal_story
