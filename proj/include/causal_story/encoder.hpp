#pragma once

// Caption/frame encoder producing one block of condition tokens per frame.
//
// Caption tokens (embedding + position) and 4x4 frame patches (linear +
// position) are concatenated, passed through one self-attention and one MLP
// layer, and pooled into b_tok learned query slots by one cross-attention.
// The caption-only variant replaces the frame patches with a learned null
// frame token.

#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "lcam.hpp"
#include "layers.hpp"
#include "param_store.hpp"
#include "rng.hpp"
#include "story_data.hpp"

namespace causal_story {

struct EncoderConfig {
    std::size_t vocab_size = 64;
    std::size_t caption_length = 12;
    std::size_t d_model = 64;
    std::size_t b_tok = 8;
    std::size_t n_heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t patch = 4;

    std::size_t n_patches() const { return (height / patch) * (width / patch); }
    std::size_t patch_dim() const { return channels * patch * patch; }

    void validate() const {
        if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
        if (caption_length < 1) throw ConfigError("model.caption_length must be >= 1");
        if (d_model < 2 || b_tok < 1) throw ConfigError("model.d_model and model.b_tok must be positive");
        if (n_heads == 0 || d_model % n_heads != 0) throw ConfigError("model.d_model must be divisible by model.n_cond_heads");
        if (height % patch != 0 || width % patch != 0) throw ConfigError("model image must be divisible by the patch size");
    }
};

inline void init_encoder_params(ParamStore& ps, const EncoderConfig& c, Rng& rng, double stddev) {
    const std::size_t d = c.d_model;
    init_normal(ps, "enc.tok_emb", {c.vocab_size, d}, stddev, rng);
    init_normal(ps, "enc.cap_pos", {c.caption_length, d}, stddev, rng);
    init_linear(ps, "enc.patch", c.patch_dim(), d, stddev, rng);
    init_normal(ps, "enc.img_pos", {c.n_patches(), d}, stddev, rng);
    init_normal(ps, "enc.null_frame", {1, d}, stddev, rng);
    init_layer_norm(ps, "enc.ln1", d);
    init_normal(ps, "enc.attn.wq", {d, d}, stddev, rng);
    init_normal(ps, "enc.attn.wk", {d, d}, stddev, rng);
    init_normal(ps, "enc.attn.wv", {d, d}, stddev, rng);
    init_constant(ps, "enc.attn.wo", {d, d}, 0.0);
    init_layer_norm(ps, "enc.ln2", d);
    init_linear(ps, "enc.mlp1", d, c.mlp_ratio * d, stddev, rng);
    init_linear(ps, "enc.mlp2", c.mlp_ratio * d, d, stddev, rng, true);
    init_normal(ps, "enc.pool.slots", {c.b_tok, d}, stddev, rng);
    init_layer_norm(ps, "enc.pool.ln", d);
    init_normal(ps, "enc.pool.wq", {d, d}, stddev, rng);
    init_normal(ps, "enc.pool.wk", {d, d}, stddev, rng);
    init_normal(ps, "enc.pool.wv", {d, d}, stddev, rng);
    init_normal(ps, "enc.pool.wo", {d, d}, stddev, rng);
    init_layer_norm(ps, "enc.out_ln", d);
    init_normal(ps, "enc.null_block", {c.b_tok, d}, stddev, rng);
}

namespace detail {

inline void check_caption(const Caption& c, const EncoderConfig& cfg) {
    if (c.size() != cfg.caption_length)
        throw DataError("caption has " + std::to_string(c.size()) + " tokens, expected " + std::to_string(cfg.caption_length));
    for (int id : c)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw DataError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
}

inline Tensor caption_tokens(const Caption& c, const ParamStore& ps, const EncoderConfig& cfg) {
    check_caption(c, cfg);
    return add(embedding(ps.at("enc.tok_emb"), c), ps.at("enc.cap_pos"));
}

inline Tensor frame_tokens(const Tensor& frame, const ParamStore& ps, const EncoderConfig& cfg) {
    if (frame.shape() != Shape{cfg.channels, cfg.height, cfg.width})
        throw DimensionError("frame shape " + shape_str(frame.shape()) + " does not match encoder config");
    const auto idx = patch_index(cfg.channels, cfg.height, cfg.width, cfg.patch);
    Tensor patches = gather(frame, idx, {cfg.n_patches(), cfg.patch_dim()});
    return add(linear(patches, ps, "enc.patch"), ps.at("enc.img_pos"));
}

inline Tensor encode_tokens(const Tensor& x0, const ParamStore& ps, const EncoderConfig& cfg) {
    Tensor h = layer_norm(x0, ps, "enc.ln1");
    Tensor a = dense_attention({matmul(h, ps.at("enc.attn.wq")), matmul(h, ps.at("enc.attn.wk")),
                                matmul(h, ps.at("enc.attn.wv")), cfg.n_heads});
    Tensor x = add(x0, matmul(a, ps.at("enc.attn.wo")));
    h = layer_norm(x, ps, "enc.ln2");
    x = add(x, linear(silu(linear(h, ps, "enc.mlp1")), ps, "enc.mlp2"));

    h = layer_norm(x, ps, "enc.pool.ln");
    const Tensor& slots = ps.at("enc.pool.slots");
    a = dense_attention({matmul(slots, ps.at("enc.pool.wq")), matmul(h, ps.at("enc.pool.wk")),
                         matmul(h, ps.at("enc.pool.wv")), cfg.n_heads});
    return layer_norm(add(slots, matmul(a, ps.at("enc.pool.wo"))), ps, "enc.out_ln");
}

}  // namespace detail

/// Condition block [b_tok x d_model] for a (caption, frame) pair.
inline Tensor encode_pair(const Caption& caption, const Tensor& frame, const ParamStore& ps, const EncoderConfig& cfg) {
    Tensor x = concat_rows({detail::caption_tokens(caption, ps, cfg), detail::frame_tokens(frame, ps, cfg)});
    return detail::encode_tokens(x, ps, cfg);
}

/// Condition block for the caption of the frame being generated.
inline Tensor encode_caption_only(const Caption& caption, const ParamStore& ps, const EncoderConfig& cfg) {
    Tensor x = concat_rows({detail::caption_tokens(caption, ps, cfg), ps.at("enc.null_frame")});
    return detail::encode_tokens(x, ps, cfg);
}

/// Encoded history m_{<t} plus the current caption block, ordered by frame.
struct ConditionMemory {
    std::vector<Tensor> blocks;
    std::vector<std::size_t> block_origin;  // 1-based frame index of each history block
    Tensor current_caption_block;

    std::size_t n_blocks() const { return blocks.size() + 1; }

    std::vector<std::size_t> block_sizes() const {
        std::vector<std::size_t> s;
        for (const auto& b : blocks) s.push_back(b.rows());
        s.push_back(current_caption_block.rows());
        return s;
    }

    /// History blocks followed by the current caption block, stacked.
    Tensor tokens() const {
        std::vector<Tensor> parts = blocks;
        parts.push_back(current_caption_block);
        return concat_rows(parts);
    }
};

struct HistoryPair {
    Caption caption;
    Tensor frame;
};

inline ConditionMemory assemble_history(const std::vector<HistoryPair>& pairs, const Caption& current, const ParamStore& ps,
                                        const EncoderConfig& cfg) {
    ConditionMemory m;
    for (std::size_t n = 0; n < pairs.size(); ++n) {
        m.blocks.push_back(encode_pair(pairs[n].caption, pairs[n].frame, ps, cfg));
        m.block_origin.push_back(n + 1);
    }
    m.current_caption_block = encode_caption_only(current, ps, cfg);
    return m;
}

/// The unconditional memory: every block replaced by the learned null block.
inline ConditionMemory null_memory(std::size_t history_length, const ParamStore& ps) {
    ConditionMemory m;
    const Tensor& nb = ps.at("enc.null_block");
    for (std::size_t n = 0; n < history_length; ++n) {
        m.blocks.push_back(nb);
        m.block_origin.push_back(n + 1);
    }
    m.current_caption_block = nb;
    return m;
}

}  // namespace causal_story
