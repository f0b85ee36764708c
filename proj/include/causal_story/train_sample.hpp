#pragma once

// Denoising-objective training with condition dropout, and autoregressive
// story sampling with classifier-free guidance.

#include <chrono>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "denoiser.hpp"
#include "encoder.hpp"
#include "lcam.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "schedule.hpp"
#include "story_data.hpp"

namespace causal_story {

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
    Optimizer optimizer = Optimizer::Adam;
    double lr = 1e-3;
    double momentum = 0.9;  ///< SGD momentum, or Adam's first-moment decay
    int steps = 500;
    int batch_size = 8;
    double p_uncond = 0.1;
    TrainMode mode = TrainMode::Full;
    std::uint64_t seed = 0;
    std::optional<std::size_t> lm_train;  ///< absent: block-causal training mask
    double grad_clip = 0.0;               ///< global-norm clip; 0 disables

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
        if (steps <= 0) throw ConfigError("train.steps must be positive");
        if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
        if (!(p_uncond >= 0.0 && p_uncond < 1.0)) throw ConfigError("train.p_uncond must be in [0, 1)");
        if (!(grad_clip >= 0.0)) throw ConfigError("train.grad_clip must be >= 0");
    }
};

struct TrainingItem {
    std::size_t story = 0;
    std::size_t frame = 0;  ///< 0-based index of the target frame
    int t = 1;              ///< diffusion step in [1, T]
    Tensor eps;             ///< standard-normal noise, frame-shaped
    bool drop_condition = false;
};

struct TrainingBatch {
    std::vector<TrainingItem> items;
};

inline TrainingBatch sample_batch(const Dataset& data, const DiffusionSchedule& sched, const TrainConfig& cfg, Rng& rng) {
    TrainingBatch b;
    const auto& g = data.config;
    const Shape shape{static_cast<std::size_t>(g.channels), static_cast<std::size_t>(g.height), static_cast<std::size_t>(g.width)};
    for (int i = 0; i < cfg.batch_size; ++i) {
        TrainingItem it;
        it.story = rng.below(data.records.size());
        it.frame = rng.below(static_cast<std::uint64_t>(g.story_length));
        it.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
        it.eps = Tensor(shape);
        for (auto& v : it.eps.mutable_data()) v = rng.normal();
        it.drop_condition = rng.bernoulli(cfg.p_uncond);
        b.items.push_back(std::move(it));
    }
    return b;
}

/// Memory for frame `frame` of a story: ground-truth history (teacher forcing)
/// or, when the condition is dropped, the null memory of the same length.
inline ConditionMemory teacher_forced_memory(const StoryRecord& story, std::size_t frame, bool drop, const Dataset& data,
                                             const StoryModel& model) {
    if (drop) return null_memory(frame, model.params);
    std::vector<HistoryPair> history;
    for (std::size_t n = 0; n < frame; ++n) history.push_back({story.captions[n], frame_tensor(story.frames[n], data.config)});
    return assemble_history(history, story.captions[frame], model.params, model.config.encoder());
}

inline MaskMatrix training_mask(const ConditionMemory& memory, const std::optional<std::size_t>& lm) {
    return lm ? build_inference_mask(memory.block_sizes(), *lm) : build_train_mask(memory.block_sizes());
}

/// Mean over items of ||eps - predict(item, x_t)||^2 / numel.
template <class Predictor>
Tensor batch_loss(const TrainingBatch& batch, const Dataset& data, const DiffusionSchedule& sched, Predictor&& predict) {
    if (batch.items.empty()) throw ContractError("empty training batch");
    std::vector<Tensor> losses;
    for (const auto& it : batch.items) {
        const auto& story = data.records.at(it.story);
        Tensor x0 = frame_tensor(story.frames.at(it.frame), data.config);
        Tensor x_t = q_sample(x0, it.t, it.eps, sched);
        losses.push_back(mse(it.eps, predict(it, x_t)));
    }
    return scale(sum(concat_rows([&] {
                     std::vector<Tensor> rows;
                     for (auto& l : losses) rows.push_back(reshape(l, {1, 1}));
                     return rows;
                 }())),
                 1.0 / static_cast<double>(losses.size()));
}

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double wall_seconds = 0.0;
};

/// Adam (default) or SGD with momentum on the model's trainable subset.
class Trainer {
public:
    Trainer(StoryModel& model, const Dataset& data, const DiffusionSchedule& sched, TrainConfig cfg)
        : model_(model), data_(data), sched_(sched), cfg_(cfg), rng_(derive_seed(cfg.seed, "train")) {
        cfg_.validate();
        model_.params.set_trainable(trainable_names(model_.params, cfg_.mode));
        for (const auto& name : model_.params.trainable())
        {
            velocity_.emplace(name, std::vector<double>(model_.params.at(name).size(), 0.0));
            if (cfg_.optimizer == Optimizer::Adam) second_.emplace(name, std::vector<double>(model_.params.at(name).size(), 0.0));
        }
        start_ = std::chrono::steady_clock::now();
    }

    /// Noise prediction of the model under teacher forcing.
    Tensor model_prediction(const TrainingItem& it, const Tensor& x_t) const {
        const auto& story = data_.records.at(it.story);
        ConditionMemory memory = teacher_forced_memory(story, it.frame, it.drop_condition, data_, model_);
        return denoise(x_t, it.t, memory, training_mask(memory, cfg_.lm_train), model_.params, model_.config.denoiser(), sched_);
    }

    /// One optimizer step on `batch` using `predict`; returns the batch loss.
    template <class Predictor>
    double train_step(const TrainingBatch& batch, Predictor&& predict) {
        ++step_;
        model_.params.zero_grads();
        Tensor loss = batch_loss(batch, data_, sched_, predict);
        const double value = loss.item();
        if (!std::isfinite(value)) {
            std::ostringstream os;
            os << "non-finite loss " << value << " at step " << step_ << " (lr=" << cfg_.lr << ")";
            throw TrainingError(os.str());
        }
        backward(loss);
        apply_update();
        log_.push_back({step_, value, std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count()});
        return value;
    }

    double train_step(const TrainingBatch& batch) {
        return train_step(batch, [this](const TrainingItem& it, const Tensor& x_t) { return model_prediction(it, x_t); });
    }

    /// Samples a batch from the trainer's stream and takes one step.
    double step() { return train_step(next_batch()); }

    TrainingBatch next_batch() { return sample_batch(data_, sched_, cfg_, rng_); }

    void run(int steps) {
        for (int i = 0; i < steps; ++i) step();
    }

    const std::vector<TrainLogEntry>& log() const { return log_; }
    int steps_taken() const { return step_; }

private:
    void apply_update() {
        double scale_factor = 1.0;
        if (cfg_.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& name : model_.params.trainable()) {
                const auto& t = model_.params.at(name);
                if (t.has_grad())
                    for (double g : t.grad()) sq += g * g;
            }
            const double norm = std::sqrt(sq);
            if (norm > cfg_.grad_clip) scale_factor = cfg_.grad_clip / norm;
        }
        for (const auto& name : model_.params.trainable()) {
            auto& t = model_.params.at(name);
            if (!t.has_grad()) continue;
            auto& v = velocity_.at(name);
            auto g = t.grad();
            auto w = t.mutable_data();
            if (cfg_.optimizer == Optimizer::Adam) {
                auto& s2 = second_.at(name);
                const double b1 = cfg_.momentum, b2 = 0.999;
                const double c1 = 1.0 - std::pow(b1, step_), c2 = 1.0 - std::pow(b2, step_);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    const double gi = scale_factor * g[i];
                    v[i] = b1 * v[i] + (1.0 - b1) * gi;
                    s2[i] = b2 * s2[i] + (1.0 - b2) * gi * gi;
                    w[i] -= cfg_.lr * (v[i] / c1) / (std::sqrt(s2[i] / c2) + 1e-8);
                }
                continue;
            }
            for (std::size_t i = 0; i < w.size(); ++i) {
                v[i] = cfg_.momentum * v[i] + scale_factor * g[i];
                w[i] -= cfg_.lr * v[i];
            }
        }
    }

    StoryModel& model_;
    const Dataset& data_;
    const DiffusionSchedule& sched_;
    TrainConfig cfg_;
    Rng rng_;
    std::map<std::string, std::vector<double>> velocity_;
    std::map<std::string, std::vector<double>> second_;
    std::vector<TrainLogEntry> log_;
    int step_ = 0;
    std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------
// Sampling

/// eps_hat = w * eps_cond - (w - 1) * eps_uncond
inline Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double w) {
    detail::require_same_shape(eps_cond, eps_uncond, "cfg_combine");
    std::vector<double> out(eps_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * eps_cond[i] - (w - 1.0) * eps_uncond[i];
    return Tensor(eps_cond.shape(), std::move(out));
}

enum class SampleMode { Visualization, Continuation };

struct SampleConfig {
    double w = 2.0;
    std::size_t lm = 4;
    SampleMode mode = SampleMode::Visualization;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(w >= 0.0)) throw ConfigError("sample.w must be >= 0");
    }
};

/// Denoiser evaluations performed by the sampler.
struct SampleStats {
    std::size_t cond_evals = 0;
    std::size_t uncond_evals = 0;
};

/// Generates frame `frame_index` (1-based) from its caption and the preceding
/// (caption, frame) pairs, attending to at most `lm` previous frames.
inline Tensor sample_frame(const std::vector<HistoryPair>& history, const Caption& caption, std::size_t frame_index,
                           const StoryModel& model, const DiffusionSchedule& sched, const SampleConfig& scfg,
                           SampleStats* stats = nullptr) {
    NoGradGuard no_grad;
    const auto den = model.config.denoiser();
    ConditionMemory memory = assemble_history(history, caption, model.params, model.config.encoder());
    const MaskMatrix mask = build_inference_mask(memory.block_sizes(), scfg.lm);
    const Tensor ctx_cond = condition_context(memory, mask, model.params, den);
    const bool guided = scfg.w != 1.0;
    Tensor ctx_uncond;
    if (guided) ctx_uncond = condition_context(null_memory(history.size(), model.params), mask, model.params, den);

    Rng rng(derive_seed(scfg.seed, "sample/frame", frame_index));
    const Shape shape{den.channels, den.height, den.width};
    Tensor x(shape);
    for (auto& v : x.mutable_data()) v = rng.normal();
    const Tensor zero(shape, 0.0);
    for (int t = sched.steps(); t >= 1; --t) {
        Tensor eps = predict_noise(x, t, ctx_cond, model.params, den, sched);
        if (stats) ++stats->cond_evals;
        if (guided) {
            Tensor eps_u = predict_noise(x, t, ctx_uncond, model.params, den, sched);
            if (stats) ++stats->uncond_evals;
            eps = cfg_combine(eps, eps_u, scfg.w);
        }
        Tensor noise = zero;
        if (t > 1) {
            noise = Tensor(shape);
            for (auto& v : noise.mutable_data()) v = rng.normal();
        }
        x = reverse_step(x, eps, t, noise, sched);
    }
    for (auto& v : x.mutable_data()) v = std::clamp(v, -1.0, 1.0);
    return x;
}

/// Generates all frames in order. Continuation mode emits `first_frame` as
/// frame 1 unchanged; visualization mode must not receive one.
inline std::vector<Tensor> sample_story(const std::vector<Caption>& captions, const StoryModel& model,
                                        const DiffusionSchedule& sched, const SampleConfig& scfg,
                                        const std::optional<Tensor>& first_frame = std::nullopt,
                                        SampleStats* stats = nullptr) {
    scfg.validate();
    if (scfg.mode == SampleMode::Continuation && !first_frame)
        throw ConfigError("continuation mode requires a first frame");
    if (scfg.mode == SampleMode::Visualization && first_frame)
        throw ConfigError("visualization mode does not take a first frame");
    if (captions.empty()) throw ConfigError("no captions to sample");
    std::vector<Tensor> frames;
    std::vector<HistoryPair> history;
    for (std::size_t t = 0; t < captions.size(); ++t) {
        Tensor f = (t == 0 && first_frame) ? first_frame->detach()
                                           : sample_frame(history, captions[t], t + 1, model, sched, scfg, stats);
        frames.push_back(f);
        history.push_back({captions[t], f});
    }
    return frames;
}

}  // namespace causal_story
