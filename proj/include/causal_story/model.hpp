#pragma once

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "denoiser.hpp"
#include "encoder.hpp"
#include "param_store.hpp"
#include "rng.hpp"

namespace causal_story {

struct ModelConfig {
    std::size_t vocab_size = 64;
    std::size_t caption_length = 12;
    std::size_t d_model = 64;
    std::size_t b_tok = 8;
    std::size_t n_cond_heads = 4;
    std::size_t n_blocks = 2;
    std::size_t mlp_ratio = 2;
    bool adapter_enabled = false;
    std::size_t adapter_bottleneck = 8;
    std::size_t channels = 3;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t patch = 4;
    double init_std = 0.02;

    EncoderConfig encoder() const {
        return {vocab_size, caption_length, d_model, b_tok, n_cond_heads, mlp_ratio, channels, height, width, patch};
    }
    DenoiserConfig denoiser() const {
        return {channels, height, width, patch, d_model, n_blocks, n_cond_heads, mlp_ratio, adapter_enabled, adapter_bottleneck};
    }
    void validate() const {
        encoder().validate();
        denoiser().validate();
        if (!(init_std > 0.0)) throw ConfigError("model.init_std must be positive");
    }

    bool operator==(const ModelConfig&) const = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},   {"caption_length", c.caption_length},
            {"d_model", c.d_model},         {"b_tok", c.b_tok},
            {"n_cond_heads", c.n_cond_heads}, {"n_blocks", c.n_blocks},
            {"mlp_ratio", c.mlp_ratio},     {"adapter_enabled", c.adapter_enabled},
            {"adapter_bottleneck", c.adapter_bottleneck}, {"image_shape", {c.channels, c.height, c.width}},
            {"patch", c.patch},             {"init_std", c.init_std}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.caption_length = j.at("caption_length").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.b_tok = j.at("b_tok").get<std::size_t>();
    c.n_cond_heads = j.at("n_cond_heads").get<std::size_t>();
    c.n_blocks = j.at("n_blocks").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.adapter_enabled = j.at("adapter_enabled").get<bool>();
    c.adapter_bottleneck = j.at("adapter_bottleneck").get<std::size_t>();
    const auto shape = j.at("image_shape").get<std::vector<std::size_t>>();
    if (shape.size() != 3) throw DataError("model image_shape must have 3 entries");
    c.channels = shape[0];
    c.height = shape[1];
    c.width = shape[2];
    c.patch = j.at("patch").get<std::size_t>();
    c.init_std = j.at("init_std").get<double>();
    return c;
}

/// Encoder, denoiser and (optionally) adapter parameters in one store.
struct StoryModel {
    ModelConfig config;
    ParamStore params;
};

inline StoryModel make_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    StoryModel m{config, {}};
    Rng rng(derive_seed(seed, "init"));
    init_encoder_params(m.params, config.encoder(), rng, config.init_std);
    auto den = config.denoiser();
    den.adapter_enabled = false;
    init_denoiser_params(m.params, den, rng, config.init_std);
    if (config.adapter_enabled) {
        Rng arng(derive_seed(seed, "adapter"));
        init_adapter_params(m.params, config.denoiser(), arng, config.init_std);
    }
    return m;
}

/// Inserts a freshly initialized (identity) adapter into a model without one.
inline void attach_adapter(StoryModel& m, std::size_t bottleneck, std::uint64_t seed) {
    if (m.config.adapter_enabled) throw ConfigError("model already has an adapter");
    m.config.adapter_enabled = true;
    m.config.adapter_bottleneck = bottleneck;
    Rng arng(derive_seed(seed, "adapter"));
    init_adapter_params(m.params, m.config.denoiser(), arng, m.config.init_std);
}

inline void save_model(const std::string& path, const StoryModel& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    write_checkpoint(os, m.params, to_json(m.config).dump());
}

/// Loads a checkpoint and verifies every parameter's name and shape against
/// the config echoed in its header.
inline StoryModel load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    auto ck = read_checkpoint(is);
    ModelConfig cfg;
    try {
        cfg = model_config_from_json(nlohmann::json::parse(ck.header));
        cfg.validate();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint " + path + ": bad config header (" + e.what() + ")");
    } catch (const ConfigError& e) {
        throw DataError("checkpoint " + path + ": " + e.what());
    }
    const StoryModel reference = make_model(cfg, 0);
    if (reference.params.names() != ck.params.names())
        throw DataError("checkpoint " + path + ": parameter names do not match its config");
    for (const auto& [name, t] : reference.params.entries())
        if (ck.params.at(name).shape() != t.shape())
            throw DataError("checkpoint " + path + ": parameter " + name + " has shape " +
                            detail::shape_str(ck.params.at(name).shape()) + ", config implies " + detail::shape_str(t.shape()));
    return StoryModel{cfg, std::move(ck.params)};
}

}  // namespace causal_story
