#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"

namespace causal_story {

/// Variance of the ancestral reverse step.
enum class VarianceMode {
    Beta,       ///< sigma_t^2 = beta_t
    Posterior,  ///< sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
};

inline constexpr double kMaxBeta = 0.999;

/// Per-step noise coefficients for T diffusion steps. Immutable once built.
class DiffusionSchedule {
public:
    DiffusionSchedule(std::vector<double> beta, VarianceMode variance = VarianceMode::Beta)
        : beta_(std::move(beta)), variance_(variance) {
        alpha_bar_.assign(beta_.size() + 1, 1.0);
        for (std::size_t t = 1; t <= beta_.size(); ++t) alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - beta_[t - 1]);
    }

    int steps() const { return static_cast<int>(beta_.size()); }
    VarianceMode variance_mode() const { return variance_; }

    /// beta_t for t in [1, T].
    double beta(int t) const {
        check(t, 1);
        return beta_[static_cast<std::size_t>(t - 1)];
    }
    double alpha(int t) const { return 1.0 - beta(t); }
    /// Cumulative product for t in [0, T]; alpha_bar(0) == 1.
    double alpha_bar(int t) const {
        check(t, 0);
        return alpha_bar_[static_cast<std::size_t>(t)];
    }

    double sigma(int t) const {
        if (variance_ == VarianceMode::Beta) return std::sqrt(beta(t));
        return std::sqrt(beta(t) * (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)));
    }

    const std::vector<double>& betas() const { return beta_; }
    const std::vector<double>& alpha_bars() const { return alpha_bar_; }

private:
    void check(int t, int lo) const {
        if (t < lo || t > steps())
            throw IndexError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                             std::to_string(steps()) + "]");
    }

    std::vector<double> beta_;
    std::vector<double> alpha_bar_;
    VarianceMode variance_;
};

/// Cosine schedule: abar(t) = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1+s)) pi/2),
/// beta_t = min(1 - abar(t)/abar(t-1), 0.999). alpha_bar is re-accumulated from
/// the clipped betas, so abar(T) stays strictly positive.
inline DiffusionSchedule make_cosine_schedule(int steps, double s = 0.008,
                                              VarianceMode variance = VarianceMode::Beta) {
    if (steps < 2) throw ConfigError("diffusion schedule needs T >= 2, got " + std::to_string(steps));
    if (!(s > 0.0)) throw ConfigError("cosine schedule offset must be positive");
    auto f = [&](int t) {
        const double c = std::cos((static_cast<double>(t) / steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0);
    std::vector<double> beta(static_cast<std::size_t>(steps));
    for (int t = 1; t <= steps; ++t) {
        const double prev = f(t - 1) / f0;
        const double cur = f(t) / f0;
        beta[static_cast<std::size_t>(t - 1)] = std::min(1.0 - cur / prev, kMaxBeta);
    }
    return DiffusionSchedule(std::move(beta), variance);
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. t = 0 returns x0.
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    detail::require_same_shape(x0, eps, "q_sample");
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return Tensor(x0.shape(), std::move(out));
}

/// One ancestral step x_t -> x_{t-1} from a noise prediction.
/// mean = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t); the
/// final step (t = 1) is deterministic and must receive zero noise.
inline Tensor reverse_step(const Tensor& x_t, const Tensor& eps_hat, int t, const Tensor& noise,
                           const DiffusionSchedule& sched) {
    detail::require_same_shape(x_t, eps_hat, "reverse_step");
    detail::require_same_shape(x_t, noise, "reverse_step");
    if (t < 1 || t > sched.steps())
        throw IndexError("reverse_step: timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps()) + "]");
    if (t == 1)
        for (double v : noise.data())
            if (v != 0.0) throw ContractError("reverse_step: the final step (t = 1) takes zero noise");
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha(t));
    const double coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
    const double sigma = t > 1 ? sched.sigma(t) : 0.0;
    std::vector<double> out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double mu = inv_sqrt_alpha * (x_t[i] - coef * eps_hat[i]);
        out[i] = sigma == 0.0 ? mu : mu + sigma * noise[i];
    }
    return Tensor(x_t.shape(), std::move(out));
}

/// Sinusoidal embedding: [sin(t w_k)..., cos(t w_k)...] with frequencies w_k
/// geometric from 1 down to 1/10000.
inline std::vector<double> timestep_embedding(int t, std::size_t dim) {
    if (dim == 0 || dim % 2 != 0) throw ConfigError("timestep embedding dim must be even and positive, got " + std::to_string(dim));
    const std::size_t half = dim / 2;
    std::vector<double> out(dim);
    for (std::size_t k = 0; k < half; ++k) {
        const double expo = half > 1 ? static_cast<double>(k) / static_cast<double>(half - 1) : 0.0;
        const double w = std::pow(10000.0, -expo);
        out[k] = std::sin(t * w);
        out[half + k] = std::cos(t * w);
    }
    return out;
}

}  // namespace causal_story
