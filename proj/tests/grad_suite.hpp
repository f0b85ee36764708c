#pragma once

#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include <causal_story/autodiff.hpp>
#include <causal_story/lcam.hpp>

#include "test_util.hpp"

namespace cs_test {

/// Worst finite-difference relative error per differentiable op over
/// `instances` random shapes and values.
inline std::map<std::string, double> op_gradient_suite(int instances, std::uint64_t seed) {
    using namespace causal_story;
    std::map<std::string, double> worst;
    auto record = [&](const std::string& op, double e) { worst[op] = std::max(worst[op], e); };
    Rng rng(seed);
    auto dim = [&](std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); };
    for (int inst = 0; inst < instances; ++inst) {
        const std::size_t m = dim(1, 4), k = dim(1, 5), n = dim(1, 4);
        Tensor a = random_tensor({m, k}, rng, 1.0, true), b = random_tensor({m, k}, rng, 1.0, true);
        Tensor w = random_tensor({m, k}, rng);
        record("add", std::max(grad_check([&] { return project(add(a, b), w); }, a),
                               grad_check([&] { return project(add(a, b), w); }, b)));
        record("sub", std::max(grad_check([&] { return project(sub(a, b), w); }, a),
                               grad_check([&] { return project(sub(a, b), w); }, b)));
        record("mul", std::max(grad_check([&] { return project(mul(a, b), w); }, a),
                               grad_check([&] { return project(mul(a, b), w); }, b)));
        record("scale", grad_check([&] { return project(scale(a, 1.3), w); }, a));
        record("silu", grad_check([&] { return project(silu(a), w); }, a));
        record("sum", grad_check([&] { return sum(mul(a, a)); }, a));
        record("mean", grad_check([&] { return mean(mul(a, w)); }, a));
        record("mse", std::max(grad_check([&] { return mse(a, b); }, a), grad_check([&] { return mse(a, b); }, b)));

        Tensor c = random_tensor({k, n}, rng, 1.0, true), wmn = random_tensor({m, n}, rng);
        record("matmul", std::max(grad_check([&] { return project(matmul(a, c), wmn); }, a),
                                  grad_check([&] { return project(matmul(a, c), wmn); }, c)));
        Tensor wt = random_tensor({k, m}, rng);
        record("transpose", grad_check([&] { return project(transpose(a), wt); }, a));
        Tensor wr = random_tensor({m * k}, rng);
        record("reshape", grad_check([&] { return project(reshape(a, {m * k}), wr); }, a));
        Tensor row = random_tensor({k}, rng, 1.0, true);
        record("add_row", std::max(grad_check([&] { return project(add_row(a, row), w); }, a),
                                   grad_check([&] { return project(add_row(a, row), w); }, row)));

        const std::size_t m2 = dim(1, 3);
        Tensor e = random_tensor({m2, k}, rng, 1.0, true), wc = random_tensor({m + m2, k}, rng);
        record("concat_rows", std::max(grad_check([&] { return project(concat_rows({a, e}), wc); }, a),
                                       grad_check([&] { return project(concat_rows({a, e}), wc); }, e)));
        const std::size_t lo = rng.below(m), hi = lo + 1 + rng.below(m - lo);
        Tensor ws = random_tensor({hi - lo, k}, rng);
        record("slice_rows", grad_check([&] { return project(slice_rows(a, lo, hi), ws); }, a));
        std::vector<std::size_t> idx(6);
        for (auto& i : idx) i = rng.below(a.size());
        Tensor wg = random_tensor({6}, rng);
        record("gather", grad_check([&] { return project(gather(a, idx, {6}), wg); }, a));
        Tensor table = random_tensor({7, k}, rng, 1.0, true), we = random_tensor({4, k}, rng);
        std::vector<int> ids(4);
        for (auto& i : ids) i = static_cast<int>(rng.below(7));
        record("embedding", grad_check([&] { return project(embedding(table, ids), we); }, table));

        const std::size_t cols = dim(2, 6);
        Tensor logits = random_tensor({m, cols}, rng, 2.0, true), wl = random_tensor({m, cols}, rng);
        std::vector<double> bias(m * cols, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 1; j < cols; ++j)
                if (rng.bernoulli(0.3)) bias[i * cols + j] = -std::numeric_limits<double>::infinity();
        record("softmax_masked",
               grad_check([&] { return project(softmax_masked(logits, AdditiveBias{m, cols, bias}), wl); }, logits));
        Tensor g = random_tensor({cols}, rng, 1.0, true), bt = random_tensor({cols}, rng, 1.0, true);
        auto ln = [&] { return project(layer_norm(logits, g, bt), wl); };
        record("layer_norm", std::max({grad_check(ln, logits), grad_check(ln, g), grad_check(ln, bt)}));

        std::vector<std::size_t> sizes(dim(1, 4));
        for (auto& s : sizes) s = dim(1, 3);
        const auto mask = rng.bernoulli(0.5) ? build_train_mask(sizes) : build_inference_mask(sizes, rng.below(3));
        const std::size_t nt = mask.n_rows(), heads = dim(1, 2), d = heads * dim(1, 3);
        Tensor q = random_tensor({nt, d}, rng, 1.0, true), kk = random_tensor({nt, d}, rng, 1.0, true),
               v = random_tensor({nt, d}, rng, 1.0, true), wa = random_tensor({nt, d}, rng);
        auto att = [&] { return project(masked_attention({q, kk, v, heads}, mask), wa); };
        record("masked_attention", std::max({grad_check(att, q), grad_check(att, kk), grad_check(att, v)}));
    }
    return worst;
}

}  // namespace cs_test
