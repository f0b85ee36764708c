#pragma once

// Small building blocks shared by the encoder and the denoiser.

#include <string>
#include <vector>

#include "autodiff.hpp"
#include "param_store.hpp"
#include "rng.hpp"

namespace causal_story {

inline void init_normal(ParamStore& ps, const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = stddev * rng.normal();
    ps.add(name, std::move(t));
}

inline void init_constant(ParamStore& ps, const std::string& name, Shape shape, double value) {
    ps.add(name, Tensor(std::move(shape), value));
}

/// Registers `prefix.w` [in x out] (normal or zero) and `prefix.b` [out] (zero).
inline void init_linear(ParamStore& ps, const std::string& prefix, std::size_t in, std::size_t out, double stddev,
                        Rng& rng, bool zero_weight = false) {
    if (zero_weight)
        init_constant(ps, prefix + ".w", {in, out}, 0.0);
    else
        init_normal(ps, prefix + ".w", {in, out}, stddev, rng);
    init_constant(ps, prefix + ".b", {out}, 0.0);
}

inline void init_layer_norm(ParamStore& ps, const std::string& prefix, std::size_t d) {
    init_constant(ps, prefix + ".g", {d}, 1.0);
    init_constant(ps, prefix + ".b", {d}, 0.0);
}

inline Tensor linear(const Tensor& x, const ParamStore& ps, const std::string& prefix) {
    return add_row(matmul(x, ps.at(prefix + ".w")), ps.at(prefix + ".b"));
}

inline Tensor layer_norm(const Tensor& x, const ParamStore& ps, const std::string& prefix) {
    return layer_norm(x, ps.at(prefix + ".g"), ps.at(prefix + ".b"));
}

/// Image [C, H, W] -> patch tokens [(H/p)(W/p) x C p p], token-major in raster
/// order; feature index is (c, y, x) within the patch.
inline std::vector<std::size_t> patch_index(std::size_t channels, std::size_t height, std::size_t width, std::size_t patch) {
    const std::size_t gh = height / patch, gw = width / patch;
    std::vector<std::size_t> idx;
    idx.reserve(channels * height * width);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px)
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t y = 0; y < patch; ++y)
                    for (std::size_t x = 0; x < patch; ++x)
                        idx.push_back((c * height + py * patch + y) * width + px * patch + x);
    return idx;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p) {
    std::vector<std::size_t> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
    return inv;
}

}  // namespace causal_story
