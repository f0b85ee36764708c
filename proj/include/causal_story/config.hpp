#pragma once

// Run configuration: one JSON document with sections seed, data, model,
// schedule, train, sample, eval and bench. Every key is optional and defaults
// to the values below; unknown keys and type mismatches are rejected with the
// offending key path.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "eval_bench.hpp"
#include "model.hpp"
#include "schedule.hpp"
#include "story_data.hpp"
#include "train_sample.hpp"

namespace causal_story {

struct ScheduleConfig {
    int steps = 100;
    double s = 0.008;
    VarianceMode variance = VarianceMode::Beta;

    DiffusionSchedule build() const { return make_cosine_schedule(steps, s, variance); }
};

struct EvalConfig {
    std::size_t n_stories = 64;
    std::uint64_t feat_seed = 0;
};

struct BenchConfig {
    std::size_t n_blocks = 16;
    std::optional<std::size_t> lm = 2;
    std::size_t b_tok = 8;
    std::size_t d = 64;
    std::size_t iters = 30;
};

struct RunConfig {
    std::uint64_t seed = 0;
    GeneratorConfig data;
    std::size_t n_stories = 2000;
    ModelConfig model;
    ScheduleConfig schedule;
    TrainConfig train;
    SampleConfig sample;
    EvalConfig eval;
    BenchConfig bench;

    /// Model config with the data-dependent fields filled in.
    ModelConfig resolved_model() const {
        ModelConfig m = model;
        m.vocab_size = static_cast<std::size_t>(make_vocabulary(data).size());
        m.caption_length = static_cast<std::size_t>(data.caption_length);
        m.channels = static_cast<std::size_t>(data.channels);
        m.height = static_cast<std::size_t>(data.height);
        m.width = static_cast<std::size_t>(data.width);
        return m;
    }

    void validate() const {
        data.validate();
        if (n_stories == 0) throw ConfigError("data.n_stories must be >= 1");
        resolved_model().validate();
        if (schedule.steps < 2) throw ConfigError("schedule.steps must be >= 2");
        if (!(schedule.s > 0.0)) throw ConfigError("schedule.s must be positive");
        train.validate();
        sample.validate();
        if (eval.n_stories < 2) throw ConfigError("eval.n_stories must be >= 2");
        if (bench.iters < 30) throw ConfigError("bench.iters must be >= 30");
        if (bench.n_blocks == 0 || bench.b_tok == 0 || bench.d == 0) throw ConfigError("bench dimensions must be positive");
    }
};

// Stream-splitting tags for the single root seed.
inline std::uint64_t data_seed(const RunConfig& c) { return derive_seed(c.seed, "data"); }
inline std::uint64_t init_seed(const RunConfig& c) { return derive_seed(c.seed, "model"); }
inline std::uint64_t train_seed(const RunConfig& c) { return derive_seed(c.seed, "train"); }
inline std::uint64_t sample_seed(const RunConfig& c) { return derive_seed(c.seed, "sample"); }

namespace detail {

using json = nlohmann::json;

inline const char* type_name(const json& v) { return v.type_name(); }

template <class T>
T expect(const json& v, const std::string& path);

template <>
inline bool expect<bool>(const json& v, const std::string& path) {
    if (!v.is_boolean()) throw ConfigError(path + ": expected boolean, got " + type_name(v));
    return v.get<bool>();
}

template <>
inline double expect<double>(const json& v, const std::string& path) {
    if (!v.is_number()) throw ConfigError(path + ": expected number, got " + type_name(v));
    return v.get<double>();
}

template <>
inline std::int64_t expect<std::int64_t>(const json& v, const std::string& path) {
    if (!v.is_number_integer()) throw ConfigError(path + ": expected integer, got " + type_name(v));
    return v.get<std::int64_t>();
}

template <>
inline std::uint64_t expect<std::uint64_t>(const json& v, const std::string& path) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
        throw ConfigError(path + ": expected non-negative integer, got " + (v.is_number() ? v.dump() : type_name(v)));
    return v.get<std::uint64_t>();
}

template <>
inline std::string expect<std::string>(const json& v, const std::string& path) {
    if (!v.is_string()) throw ConfigError(path + ": expected string, got " + type_name(v));
    return v.get<std::string>();
}

inline int as_int(const json& v, const std::string& path) {
    const auto x = expect<std::int64_t>(v, path);
    if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(path + ": integer out of range");
    return static_cast<int>(x);
}

inline std::size_t as_size(const json& v, const std::string& path) { return static_cast<std::size_t>(expect<std::uint64_t>(v, path)); }

inline std::optional<std::size_t> as_opt_size(const json& v, const std::string& path) {
    if (v.is_null()) return std::nullopt;
    return as_size(v, path);
}

using Setters = std::map<std::string, std::function<void(const json&, const std::string&)>>;

inline void apply_section(const json& j, const std::string& section, const Setters& setters) {
    if (!j.is_object()) throw ConfigError(section + ": expected object, got " + type_name(j));
    for (const auto& [key, value] : j.items()) {
        const std::string path = section + "." + key;
        auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError(path + ": unknown key");
        it->second(value, path);
    }
}

inline std::string variance_name(VarianceMode m) { return m == VarianceMode::Beta ? "beta" : "posterior"; }
inline std::string optimizer_name(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "adam"; }
inline std::string train_mode_name(TrainMode m) { return m == TrainMode::Full ? "full" : "adapter_only"; }
inline std::string sample_mode_name(SampleMode m) { return m == SampleMode::Visualization ? "visualization" : "continuation"; }

inline json opt_json(const std::optional<std::size_t>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace detail

inline SampleMode parse_sample_mode(const std::string& s, const std::string& path) {
    if (s == "visualization") return SampleMode::Visualization;
    if (s == "continuation") return SampleMode::Continuation;
    throw ConfigError(path + ": expected \"visualization\" or \"continuation\", got \"" + s + "\"");
}

/// Overlays `j` onto `c`. Keys absent from `j` keep their current values.
inline void apply_json(RunConfig& c, const nlohmann::json& j) {
    using detail::as_int;
    using detail::as_opt_size;
    using detail::as_size;
    using detail::expect;
    using detail::json;
    auto& g = c.data;
    auto& m = c.model;
    auto& sc = c.schedule;
    auto& t = c.train;
    auto& s = c.sample;
    auto& e = c.eval;
    auto& b = c.bench;
    const detail::Setters data{
        {"n_stories", [&](const json& v, const std::string& p) { c.n_stories = as_size(v, p); }},
        {"story_length", [&](const json& v, const std::string& p) { g.story_length = as_int(v, p); }},
        {"grid", [&](const json& v, const std::string& p) { g.grid = as_int(v, p); }},
        {"n_backgrounds", [&](const json& v, const std::string& p) { g.n_backgrounds = as_int(v, p); }},
        {"n_characters", [&](const json& v, const std::string& p) { g.n_characters = as_int(v, p); }},
        {"n_actions", [&](const json& v, const std::string& p) { g.n_actions = as_int(v, p); }},
        {"max_characters", [&](const json& v, const std::string& p) { g.max_characters = as_int(v, p); }},
        {"p_omit", [&](const json& v, const std::string& p) { g.p_omit = expect<double>(v, p); }},
        {"caption_length", [&](const json& v, const std::string& p) { g.caption_length = as_int(v, p); }},
        {"image_size", [&](const json& v, const std::string& p) { g.height = g.width = as_int(v, p); }},
    };
    const detail::Setters model{
        {"d_model", [&](const json& v, const std::string& p) { m.d_model = as_size(v, p); }},
        {"b_tok", [&](const json& v, const std::string& p) { m.b_tok = as_size(v, p); }},
        {"n_cond_heads", [&](const json& v, const std::string& p) { m.n_cond_heads = as_size(v, p); }},
        {"n_blocks", [&](const json& v, const std::string& p) { m.n_blocks = as_size(v, p); }},
        {"mlp_ratio", [&](const json& v, const std::string& p) { m.mlp_ratio = as_size(v, p); }},
        {"adapter_enabled", [&](const json& v, const std::string& p) { m.adapter_enabled = expect<bool>(v, p); }},
        {"adapter_bottleneck", [&](const json& v, const std::string& p) { m.adapter_bottleneck = as_size(v, p); }},
        {"patch", [&](const json& v, const std::string& p) { m.patch = as_size(v, p); }},
        {"init_std", [&](const json& v, const std::string& p) { m.init_std = expect<double>(v, p); }},
    };
    const detail::Setters schedule{
        {"steps", [&](const json& v, const std::string& p) { sc.steps = as_int(v, p); }},
        {"s", [&](const json& v, const std::string& p) { sc.s = expect<double>(v, p); }},
        {"variance",
         [&](const json& v, const std::string& p) {
             const auto x = expect<std::string>(v, p);
             if (x == "beta")
                 sc.variance = VarianceMode::Beta;
             else if (x == "posterior")
                 sc.variance = VarianceMode::Posterior;
             else
                 throw ConfigError(p + ": expected \"beta\" or \"posterior\", got \"" + x + "\"");
         }},
    };
    const detail::Setters train{
        {"optimizer",
         [&](const json& v, const std::string& p) {
             const auto x = expect<std::string>(v, p);
             if (x == "sgd")
                 t.optimizer = Optimizer::Sgd;
             else if (x == "adam")
                 t.optimizer = Optimizer::Adam;
             else
                 throw ConfigError(p + ": expected \"sgd\" or \"adam\", got \"" + x + "\"");
         }},
        {"lr", [&](const json& v, const std::string& p) { t.lr = expect<double>(v, p); }},
        {"momentum", [&](const json& v, const std::string& p) { t.momentum = expect<double>(v, p); }},
        {"steps", [&](const json& v, const std::string& p) { t.steps = as_int(v, p); }},
        {"batch_size", [&](const json& v, const std::string& p) { t.batch_size = as_int(v, p); }},
        {"p_uncond", [&](const json& v, const std::string& p) { t.p_uncond = expect<double>(v, p); }},
        {"grad_clip", [&](const json& v, const std::string& p) { t.grad_clip = expect<double>(v, p); }},
        {"lm_train", [&](const json& v, const std::string& p) { t.lm_train = as_opt_size(v, p); }},
        {"mode",
         [&](const json& v, const std::string& p) {
             const auto x = expect<std::string>(v, p);
             if (x == "full")
                 t.mode = TrainMode::Full;
             else if (x == "adapter_only")
                 t.mode = TrainMode::AdapterOnly;
             else
                 throw ConfigError(p + ": expected \"full\" or \"adapter_only\", got \"" + x + "\"");
         }},
    };
    const detail::Setters sample{
        {"w", [&](const json& v, const std::string& p) { s.w = expect<double>(v, p); }},
        {"lm", [&](const json& v, const std::string& p) { s.lm = as_size(v, p); }},
        {"mode", [&](const json& v, const std::string& p) { s.mode = parse_sample_mode(expect<std::string>(v, p), p); }},
    };
    const detail::Setters eval{
        {"n_stories", [&](const json& v, const std::string& p) { e.n_stories = as_size(v, p); }},
        {"feat_seed", [&](const json& v, const std::string& p) { e.feat_seed = expect<std::uint64_t>(v, p); }},
    };
    const detail::Setters bench{
        {"L", [&](const json& v, const std::string& p) { b.n_blocks = as_size(v, p); }},
        {"lm", [&](const json& v, const std::string& p) { b.lm = as_opt_size(v, p); }},
        {"b_tok", [&](const json& v, const std::string& p) { b.b_tok = as_size(v, p); }},
        {"d", [&](const json& v, const std::string& p) { b.d = as_size(v, p); }},
        {"iters", [&](const json& v, const std::string& p) { b.iters = as_size(v, p); }},
    };
    const std::map<std::string, const detail::Setters*> sections{{"data", &data},   {"model", &model}, {"schedule", &schedule},
                                                                 {"train", &train}, {"sample", &sample}, {"eval", &eval},
                                                                 {"bench", &bench}};
    if (!j.is_object()) throw ConfigError("config: top level must be an object");
    for (const auto& [key, value] : j.items()) {
        if (key == "seed") {
            c.seed = expect<std::uint64_t>(value, "seed");
            continue;
        }
        auto it = sections.find(key);
        if (it == sections.end()) throw ConfigError(key + ": unknown key");
        detail::apply_section(value, key, *it->second);
    }
}

inline nlohmann::json to_json(const RunConfig& c) {
    using detail::json;
    return json{
        {"seed", c.seed},
        {"data",
         {{"n_stories", c.n_stories},
          {"story_length", c.data.story_length},
          {"grid", c.data.grid},
          {"n_backgrounds", c.data.n_backgrounds},
          {"n_characters", c.data.n_characters},
          {"n_actions", c.data.n_actions},
          {"max_characters", c.data.max_characters},
          {"p_omit", c.data.p_omit},
          {"caption_length", c.data.caption_length},
          {"image_size", c.data.height}}},
        {"model",
         {{"d_model", c.model.d_model},
          {"b_tok", c.model.b_tok},
          {"n_cond_heads", c.model.n_cond_heads},
          {"n_blocks", c.model.n_blocks},
          {"mlp_ratio", c.model.mlp_ratio},
          {"adapter_enabled", c.model.adapter_enabled},
          {"adapter_bottleneck", c.model.adapter_bottleneck},
          {"patch", c.model.patch},
          {"init_std", c.model.init_std}}},
        {"schedule", {{"steps", c.schedule.steps}, {"s", c.schedule.s}, {"variance", detail::variance_name(c.schedule.variance)}}},
        {"train",
         {{"optimizer", detail::optimizer_name(c.train.optimizer)},
          {"lr", c.train.lr},
          {"momentum", c.train.momentum},
          {"steps", c.train.steps},
          {"batch_size", c.train.batch_size},
          {"p_uncond", c.train.p_uncond},
          {"grad_clip", c.train.grad_clip},
          {"lm_train", detail::opt_json(c.train.lm_train)},
          {"mode", detail::train_mode_name(c.train.mode)}}},
        {"sample", {{"w", c.sample.w}, {"lm", c.sample.lm}, {"mode", detail::sample_mode_name(c.sample.mode)}}},
        {"eval", {{"n_stories", c.eval.n_stories}, {"feat_seed", c.eval.feat_seed}}},
        {"bench",
         {{"L", c.bench.n_blocks},
          {"lm", detail::opt_json(c.bench.lm)},
          {"b_tok", c.bench.b_tok},
          {"d", c.bench.d},
          {"iters", c.bench.iters}}},
    };
}

/// Reads and overlays a config file onto the defaults (no validation).
inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config file not found: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    RunConfig c;
    apply_json(c, j);
    return c;
}

inline void write_resolved_config(const std::string& path, const RunConfig& c) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write resolved config " + path);
    os << to_json(c).dump(2) << '\n';
}

}  // namespace causal_story
