#pragma once

// Local causal attention masks over frame blocks and the blocked attention
// kernel that evaluates only admissible key ranges.
//
// Token i belongs to frame block b(i). Under the training mask row i may read
// every token of blocks b <= b(i); under the inference mask with window L_M it
// may read blocks b(i) - L_M <= b <= b(i). Blocks are contiguous in token
// order, so every row's admissible keys form one contiguous range.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace causal_story {

/// Admissible key range [begin, end) for one query row.
struct KeyRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
};

class MaskMatrix {
public:
    MaskMatrix(std::vector<std::size_t> block_sizes, std::optional<std::size_t> window)
        : window_(window), block_sizes_(std::move(block_sizes)) {
        if (block_sizes_.empty()) throw ConfigError("mask needs at least one frame block");
        std::vector<std::size_t> block_start;
        std::size_t n = 0;
        for (std::size_t b = 0; b < block_sizes_.size(); ++b) {
            if (block_sizes_[b] == 0) throw ConfigError("frame block " + std::to_string(b) + " has no tokens");
            block_start.push_back(n);
            for (std::size_t k = 0; k < block_sizes_[b]; ++k) block_map_.push_back(b);
            n += block_sizes_[b];
        }
        n_ = n;
        ranges_.resize(n);
        bias_.assign(n * n, -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t bi = block_map_[i];
            const std::size_t lo_block = window_ && *window_ < bi ? bi - *window_ : 0;
            ranges_[i] = {block_start[lo_block], block_start[bi] + block_sizes_[bi]};
            for (std::size_t j = ranges_[i].begin; j < ranges_[i].end; ++j) bias_[i * n + j] = 0.0;
        }
    }

    std::size_t n_rows() const { return n_; }
    std::size_t n_cols() const { return n_; }
    std::size_t n_blocks() const { return block_sizes_.size(); }
    const std::vector<std::size_t>& block_sizes() const { return block_sizes_; }
    const std::vector<std::size_t>& block_map() const { return block_map_; }
    std::optional<std::size_t> window() const { return window_; }

    bool allowed(std::size_t i, std::size_t j) const { return bias_[i * n_ + j] == 0.0; }
    double bias(std::size_t i, std::size_t j) const { return bias_[i * n_ + j]; }
    const std::vector<double>& bias_values() const { return bias_; }
    AdditiveBias additive_bias() const { return {n_, n_, bias_}; }

    const std::vector<KeyRange>& row_ranges() const { return ranges_; }

    /// Number of admissible (query, key) pairs.
    std::size_t allowed_pairs() const {
        std::size_t c = 0;
        for (const auto& r : ranges_) c += r.size();
        return c;
    }

private:
    std::optional<std::size_t> window_;
    std::vector<std::size_t> block_sizes_;
    std::vector<std::size_t> block_map_;
    std::size_t n_ = 0;
    std::vector<double> bias_;
    std::vector<KeyRange> ranges_;
};

/// Block-causal mask including the diagonal block.
inline MaskMatrix build_train_mask(const std::vector<std::size_t>& block_sizes) {
    return MaskMatrix(block_sizes, std::nullopt);
}

/// Block-banded mask: block i reads blocks i - window .. i.
inline MaskMatrix build_inference_mask(const std::vector<std::size_t>& block_sizes, std::size_t window) {
    return MaskMatrix(block_sizes, window);
}

inline Tensor softmax_masked(const Tensor& logits, const MaskMatrix& mask) {
    return softmax_masked(logits, mask.additive_bias());
}

/// Q, K, V for one attention call. Heads split the feature axis evenly.
struct AttentionInputs {
    Tensor q;  ///< [n_q x d]
    Tensor k;  ///< [n_k x d]
    Tensor v;  ///< [n_k x d]
    std::size_t n_heads = 1;
};

/// softmax(Q K^T / sqrt(d_head)) V restricted to each row's key range. Keys
/// outside the range are never touched, forward or backward.
inline Tensor range_attention(const AttentionInputs& in, const std::vector<KeyRange>& ranges) {
    const auto& q = in.q;
    const auto& k = in.k;
    const auto& v = in.v;
    detail::require_rank2(q, "attention");
    detail::require_rank2(k, "attention");
    detail::require_rank2(v, "attention");
    const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), heads = in.n_heads;
    if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != nk)
        throw DimensionError("attention: Q " + detail::shape_str(q.shape()) + ", K " + detail::shape_str(k.shape()) +
                             ", V " + detail::shape_str(v.shape()));
    if (heads == 0 || d % heads != 0)
        throw DimensionError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    if (ranges.size() != nq) throw DimensionError("attention: mask rows differ from query count");
    for (std::size_t i = 0; i < nq; ++i) {
        if (ranges[i].size() == 0) throw InvalidMaskError("attention: query row " + std::to_string(i) + " has no admissible key");
        if (ranges[i].end > nk) throw DimensionError("attention: mask columns exceed key count");
    }
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    // probabilities per (head, row), packed by row range
    std::vector<std::size_t> offset(nq + 1, 0);
    for (std::size_t i = 0; i < nq; ++i) offset[i + 1] = offset[i] + ranges[i].size();
    std::vector<double> prob(heads * offset[nq]);
    std::vector<double> out(nq * d, 0.0);
    const double* Q = q.data().data();
    const double* K = k.data().data();
    const double* V = v.data().data();

    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < nq; ++i) {
            double* p = prob.data() + h * offset[nq] + offset[i];
            const auto [lo, hi] = ranges[i];
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = lo; j < hi; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + c0 + c] * K[j * d + c0 + c];
                s *= inv_sqrt;
                p[j - lo] = s;
                mx = std::max(mx, s);
            }
            double z = 0.0;
            for (std::size_t j = lo; j < hi; ++j) {
                p[j - lo] = std::exp(p[j - lo] - mx);
                z += p[j - lo];
            }
            const double inv_z = 1.0 / z;
            double* o = out.data() + i * d + c0;
            for (std::size_t j = lo; j < hi; ++j) {
                p[j - lo] *= inv_z;
                const double w = p[j - lo];
                for (std::size_t c = 0; c < dh; ++c) o[c] += w * V[j * d + c0 + c];
            }
        }
    }

    return detail::make_result(
        {nq, d}, std::move(out), {q, k, v},
        [ranges, offset = std::move(offset), prob = std::move(prob), nq, d, dh, heads, inv_sqrt](detail::Node& self) {
            auto& Qn = *self.parents[0];
            auto& Kn = *self.parents[1];
            auto& Vn = *self.parents[2];
            const double* dO = self.grad.data();
            double* dQ = Qn.requires_grad ? Qn.ensure_grad().data() : nullptr;
            double* dK = Kn.requires_grad ? Kn.ensure_grad().data() : nullptr;
            double* dV = Vn.requires_grad ? Vn.ensure_grad().data() : nullptr;
            std::vector<double> ds;
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < nq; ++i) {
                    const double* p = prob.data() + h * offset[nq] + offset[i];
                    const auto [lo, hi] = ranges[i];
                    const double* go = dO + i * d + c0;
                    ds.assign(hi - lo, 0.0);
                    double dot = 0.0;
                    for (std::size_t j = lo; j < hi; ++j) {
                        double dp = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) dp += go[c] * Vn.value[j * d + c0 + c];
                        ds[j - lo] = dp;
                        dot += p[j - lo] * dp;
                        if (dV)
                            for (std::size_t c = 0; c < dh; ++c) dV[j * d + c0 + c] += p[j - lo] * go[c];
                    }
                    for (std::size_t j = lo; j < hi; ++j) {
                        const double g = p[j - lo] * (ds[j - lo] - dot) * inv_sqrt;
                        if (dQ)
                            for (std::size_t c = 0; c < dh; ++c) dQ[i * d + c0 + c] += g * Kn.value[j * d + c0 + c];
                        if (dK)
                            for (std::size_t c = 0; c < dh; ++c) dK[j * d + c0 + c] += g * Qn.value[i * d + c0 + c];
                    }
                }
            }
        });
}

/// Attention with every key admissible for every query.
inline Tensor dense_attention(const AttentionInputs& in) {
    return range_attention(in, std::vector<KeyRange>(in.q.dim(0), KeyRange{0, in.k.dim(0)}));
}

/// softmax(Q K^T / sqrt(d_head) + M) V over the block-structured mask.
inline Tensor masked_attention(const AttentionInputs& in, const MaskMatrix& mask) {
    if (in.q.dim(0) != mask.n_rows() || in.k.dim(0) != mask.n_cols())
        throw DimensionError("masked_attention: mask is " + std::to_string(mask.n_rows()) + "x" +
                             std::to_string(mask.n_cols()) + ", Q " + detail::shape_str(in.q.shape()) + ", K " +
                             detail::shape_str(in.k.shape()));
    return range_attention(in, mask.row_ranges());
}

/// Flops charged per admissible score for the softmax (exp, accumulate, normalize).
inline constexpr std::uint64_t kSoftmaxFlopsPerEntry = 3;

/// Exact flop count of the blocked kernel for `n_blocks` blocks of
/// `tokens_per_block` tokens at width d: 2d per admissible score, 2d per
/// admissible value accumulation, plus the softmax charge.
inline std::uint64_t attention_cost(std::size_t n_blocks, std::size_t tokens_per_block, std::size_t d,
                                    std::optional<std::size_t> window) {
    std::uint64_t pairs = 0;
    for (std::size_t b = 0; b < n_blocks; ++b) {
        const std::size_t visible = window ? std::min(b, *window) + 1 : b + 1;
        pairs += static_cast<std::uint64_t>(tokens_per_block) * visible * tokens_per_block;
    }
    return pairs * (4 * static_cast<std::uint64_t>(d) + kSoftmaxFlopsPerEntry);
}

}  // namespace causal_story
