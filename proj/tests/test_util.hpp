#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include <causal_story/autodiff.hpp>
#include <causal_story/rng.hpp>

namespace cs_test {

using causal_story::Shape;
using causal_story::Tensor;

inline Tensor random_tensor(const Shape& shape, causal_story::Rng& rng, double scale = 1.0, bool requires_grad = false) {
    Tensor t(shape);
    for (auto& v : t.mutable_data()) v = scale * rng.normal();
    t.set_requires_grad(requires_grad);
    return t;
}

/// max_i |analytic - numeric| / max(|numeric|, 1e-8) over the chosen entries
/// of x (all entries when `entries` is empty).
inline double grad_check(const std::function<Tensor()>& f, Tensor x, const std::vector<std::size_t>& entries = {},
                         double h = 1e-5) {
    x.zero_grad();
    Tensor loss = f();
    causal_story::backward(loss);
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    std::vector<std::size_t> idx = entries;
    if (idx.empty())
        for (std::size_t i = 0; i < x.size(); ++i) idx.push_back(i);
    causal_story::NoGradGuard no_grad;
    double worst = 0.0;
    auto data = x.mutable_data();
    for (std::size_t i : idx) {
        const double saved = data[i];
        data[i] = saved + h;
        const double fp = f().item();
        data[i] = saved - h;
        const double fm = f().item();
        data[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8));
    }
    return worst;
}

/// Scalar projection sum(y * w) with fixed random weights, so every output
/// element influences the loss with a distinct coefficient.
inline Tensor project(const Tensor& y, const Tensor& w) { return causal_story::sum(causal_story::mul(y, w)); }

}  // namespace cs_test
