#pragma once

// Command-line front end: gen-data, train, sample, eval, bench.
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "config.hpp"
#include "eval_bench.hpp"
#include "model.hpp"
#include "story_data.hpp"
#include "train_sample.hpp"

namespace causal_story {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;

inline constexpr const char* kBenchCsvHeader = "mask,n_blocks,lm,b_tok,d,iters,median_ns,mad_ns,flops,allowed_pairs";
inline constexpr const char* kMetricsCsvHeader = "proxy_fid,background_consistency,n_stories,seed";
inline constexpr const char* kTrainLogHeader = "step,loss,wall_time_s";

// ---------------------------------------------------------------------------
// Binary PPM (P6, maxval 255)

inline void write_ppm(const std::string& path, const Pixels& chw, int height, int width) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    os << "P6\n" << width << ' ' << height << "\n255\n";
    const std::size_t plane = static_cast<std::size_t>(height * width);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) os.put(static_cast<char>(chw[c * plane + i]));
}

inline Pixels read_ppm(const std::string& path, int height, int width) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open image " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw DataError(path + ": expected a binary PPM (P6) with maxval 255");
    if (w != width || h != height)
        throw DataError(path + ": image is " + std::to_string(w) + "x" + std::to_string(h) + ", expected " +
                        std::to_string(width) + "x" + std::to_string(height));
    is.get();
    const std::size_t plane = static_cast<std::size_t>(height * width);
    std::vector<char> raw(plane * 3);
    if (!is.read(raw.data(), static_cast<std::streamsize>(raw.size()))) throw DataError(path + ": truncated pixel data");
    Pixels chw(plane * 3);
    for (std::size_t i = 0; i < plane; ++i)
        for (std::size_t c = 0; c < 3; ++c) chw[c * plane + i] = static_cast<std::uint8_t>(raw[i * 3 + c]);
    return chw;
}

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write " + path);
    os << text;
}

/// Tokenizes "beach fox act2 row0 col3" and pads to the caption length.
inline Caption parse_caption(const nlohmann::json& v, const Vocabulary& vocab, std::size_t length, std::size_t index) {
    Caption c;
    const std::string where = "captions[" + std::to_string(index) + "]";
    if (v.is_string()) {
        std::istringstream ss(v.get<std::string>());
        std::string w;
        while (ss >> w) {
            const int id = vocab.id_of(w);
            if (id < 0) throw DataError(where + ": unknown word '" + w + "'");
            c.push_back(id);
        }
    } else if (v.is_array()) {
        for (const auto& x : v) {
            if (!x.is_number_integer()) throw DataError(where + ": token ids must be integers");
            c.push_back(x.get<int>());
        }
    } else {
        throw DataError(where + ": expected a string or an array of token ids");
    }
    if (c.size() > length)
        throw DataError(where + ": " + std::to_string(c.size()) + " tokens exceed caption length " + std::to_string(length));
    c.resize(length, kPadToken);
    for (int id : c)
        if (id < 0 || id >= vocab.size()) throw DataError(where + ": token id " + std::to_string(id) + " outside vocabulary");
    return c;
}

inline std::string caption_text(const Caption& c, const Vocabulary& vocab) {
    std::string out;
    for (int id : c) {
        if (id == kPadToken) continue;
        if (!out.empty()) out += ' ';
        out += vocab.words.at(static_cast<std::size_t>(id));
    }
    return out;
}

inline void check_model_matches_data(const ModelConfig& m, const GeneratorConfig& g, const std::string& what) {
    const auto vocab = static_cast<std::size_t>(make_vocabulary(g).size());
    if (m.vocab_size != vocab || m.caption_length != static_cast<std::size_t>(g.caption_length) ||
        m.height != static_cast<std::size_t>(g.height) || m.width != static_cast<std::size_t>(g.width))
        throw ConfigError(what + ": model vocabulary/caption/image shape does not match the data configuration");
}

/// Visualization-mode samples for stories [0, n) with per-story seeds.
inline std::vector<std::vector<Tensor>> sample_stories(const Dataset& ds, std::size_t n, const StoryModel& model,
                                                       const DiffusionSchedule& sched, SampleConfig scfg) {
    std::vector<std::vector<Tensor>> out;
    const std::uint64_t root = scfg.seed;
    for (std::size_t i = 0; i < n; ++i) {
        scfg.seed = derive_seed(root, "story", i);
        out.push_back(sample_story(ds.records[i].captions, model, sched, scfg));
    }
    return out;
}

struct CommonOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
};

inline RunConfig resolve(const CommonOptions& o) {
    RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
    if (o.seed) c.seed = *o.seed;
    return c;
}

}  // namespace detail

/// Runs one subcommand. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Story visualization with local causal attention over frame history."};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    detail::CommonOptions common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "Run config JSON (defaults apply to missing keys)");
        sub->add_option("--seed", common.seed, "Root seed (overrides config 'seed'; default 0)");
    };

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic story corpus");
    std::string gen_out;
    std::optional<std::size_t> gen_n;
    add_common(gen);
    gen->add_option("--out", gen_out, "Output dataset file (JSON lines)")->required();
    gen->add_option("--count,--n-stories", gen_n, "Number of stories (default 2000)");

    // train
    auto* train = app.add_subcommand("train", "Train the model on a dataset");
    std::string train_data, train_ckpt, base_ckpt, train_log;
    bool adapter_only = false;
    std::optional<int> train_steps;
    std::optional<double> train_lr;
    add_common(train);
    train->add_option("--data", train_data, "Dataset file")->required();
    train->add_option("--out-ckpt", train_ckpt, "Output checkpoint")->required();
    train->add_flag("--adapter-only", adapter_only, "Train only the adapter on top of --base-ckpt");
    train->add_option("--base-ckpt", base_ckpt, "Base checkpoint for adapter-only training");
    train->add_option("--steps", train_steps, "Optimizer steps (default 500)");
    train->add_option("--lr", train_lr, "Learning rate (default 1e-3)");
    train->add_option("--log", train_log, "Training log CSV (default <out-ckpt>.log.csv)");

    // sample
    auto* sample = app.add_subcommand("sample", "Generate one story from captions");
    std::string sample_ckpt, captions_file, out_dir, first_frame_path;
    std::optional<std::string> sample_mode;
    std::optional<std::size_t> sample_lm;
    std::optional<double> sample_w;
    add_common(sample);
    sample->add_option("--ckpt", sample_ckpt, "Checkpoint")->required();
    sample->add_option("--captions-file", captions_file,
                       "JSON {\"captions\": [...], \"first_frame\": optional PPM path}; captions are word strings or token-id arrays")
        ->required();
    sample->add_option("--mode", sample_mode, "visualization | continuation (default visualization)");
    sample->add_option("--lm", sample_lm, "Attention window in previous frames (default 4)");
    sample->add_option("--w", sample_w, "Guidance scale (default 2.0)");
    sample->add_option("--first-frame", first_frame_path, "Ground-truth first frame (PPM) for continuation");
    sample->add_option("--out-dir", out_dir, "Output directory for frames and manifest")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "Proxy-FID and background consistency of sampled stories");
    std::string eval_ckpt, eval_data, eval_out;
    std::optional<std::size_t> eval_n, eval_lm;
    std::optional<double> eval_w;
    add_common(eval);
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
    eval->add_option("--data", eval_data, "Dataset file (reference stories)")->required();
    eval->add_option("--out", eval_out, "Metrics CSV")->required();
    eval->add_option("--n-stories", eval_n, "Stories to sample (default 64)");
    eval->add_option("--lm", eval_lm, "Attention window (default 4)");
    eval->add_option("--w", eval_w, "Guidance scale (default 2.0)");

    // bench
    auto* bench = app.add_subcommand("bench", "Time masked attention, full vs windowed mask");
    std::string bench_out;
    std::optional<std::size_t> bench_L, bench_btok, bench_d, bench_iters;
    std::optional<std::string> bench_lm;
    bench->add_option("--config", common.config_path, "Run config JSON");
    bench->add_option("--L", bench_L, "Number of frame blocks (default 16)");
    bench->add_option("--lm", bench_lm, "Window in previous blocks, or 'full' (default 2)");
    bench->add_option("--btok", bench_btok, "Tokens per block (default 8)");
    bench->add_option("--d", bench_d, "Model width (default 64)");
    bench->add_option("--iters", bench_iters, "Timed calls per mask, >= 30 (default 30)");
    bench->add_option("--out", bench_out, std::string("Output CSV with header: ") + kBenchCsvHeader)->required();

    std::vector<std::string> argv_rev(args.rbegin(), args.rend());
    try {
        app.parse(argv_rev);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return kExitConfig;
    }

    try {
        if (gen->parsed()) {
            RunConfig c = detail::resolve(common);
            if (gen_n) c.n_stories = *gen_n;
            c.validate();
            Dataset ds{c.data, make_vocabulary(c.data), generate_corpus(data_seed(c), c.n_stories, c.data)};
            write_dataset(gen_out, ds);
            write_resolved_config(gen_out + ".config.json", c);
            out << "wrote " << ds.records.size() << " stories to " << gen_out << "\n";
            return kExitOk;
        }

        if (train->parsed()) {
            RunConfig c = detail::resolve(common);
            if (train_steps) c.train.steps = *train_steps;
            if (train_lr) c.train.lr = *train_lr;
            if (adapter_only) c.train.mode = TrainMode::AdapterOnly;
            if (c.train.mode == TrainMode::AdapterOnly && base_ckpt.empty())
                throw ConfigError("train: adapter-only training requires --base-ckpt");
            if (c.train.mode == TrainMode::Full && !base_ckpt.empty())
                throw ConfigError("train: --base-ckpt is only used with --adapter-only");
            c.validate();
            Dataset ds = read_dataset(train_data);
            c.data = ds.config;
            StoryModel model;
            if (c.train.mode == TrainMode::AdapterOnly) {
                model = load_model(base_ckpt);
                if (!model.config.adapter_enabled) attach_adapter(model, c.model.adapter_bottleneck, init_seed(c));
            } else {
                model = make_model(c.resolved_model(), init_seed(c));
            }
            detail::check_model_matches_data(model.config, ds.config, "train");
            const auto sched = c.schedule.build();
            TrainConfig tc = c.train;
            tc.seed = train_seed(c);
            Trainer trainer(model, ds, sched, tc);
            trainer.run(tc.steps);
            save_model(train_ckpt, model);
            std::ostringstream log;
            log << kTrainLogHeader << '\n';
            for (const auto& e : trainer.log())
                log << e.step << ',' << detail::fmt_double(e.loss) << ',' << detail::fmt_double(e.wall_seconds) << '\n';
            detail::write_text(train_log.empty() ? train_ckpt + ".log.csv" : train_log, log.str());
            write_resolved_config(train_ckpt + ".config.json", c);
            out << "trained " << tc.steps << " steps, final loss " << trainer.log().back().loss << "\n";
            return kExitOk;
        }

        if (sample->parsed()) {
            RunConfig c = detail::resolve(common);
            if (sample_mode) c.sample.mode = parse_sample_mode(*sample_mode, "--mode");
            if (sample_lm) c.sample.lm = *sample_lm;
            if (sample_w) c.sample.w = *sample_w;
            c.validate();

            std::ifstream is(captions_file);
            if (!is) throw ConfigError("captions file not found: " + captions_file);
            nlohmann::json cj;
            try {
                cj = nlohmann::json::parse(is);
            } catch (const nlohmann::json::parse_error& e) {
                throw DataError(captions_file + " is not valid JSON: " + e.what());
            }
            if (!cj.is_object() || !cj.contains("captions") || !cj["captions"].is_array() || cj["captions"].empty())
                throw DataError(captions_file + ": expected an object with a non-empty \"captions\" array");
            if (first_frame_path.empty() && cj.contains("first_frame")) {
                if (!cj["first_frame"].is_string()) throw DataError(captions_file + ": first_frame must be a path string");
                const std::filesystem::path p = cj["first_frame"].get<std::string>();
                first_frame_path = p.is_absolute() ? p.string()
                                                   : (std::filesystem::path(captions_file).parent_path() / p).string();
            }
            if (c.sample.mode == SampleMode::Continuation && first_frame_path.empty())
                throw ConfigError("sample: continuation mode requires a first frame (--first-frame or captions-file first_frame)");
            if (c.sample.mode == SampleMode::Visualization && !first_frame_path.empty())
                throw ConfigError("sample: visualization mode does not take a first frame");

            StoryModel model = load_model(sample_ckpt);
            GeneratorConfig g = c.data;
            const Vocabulary vocab = make_vocabulary(g);
            detail::check_model_matches_data(model.config, g, "sample");
            std::vector<Caption> captions;
            for (std::size_t i = 0; i < cj["captions"].size(); ++i)
                captions.push_back(detail::parse_caption(cj["captions"][i], vocab, model.config.caption_length, i));
            std::optional<Tensor> first;
            if (!first_frame_path.empty()) first = frame_tensor(read_ppm(first_frame_path, g.height, g.width), g);

            const auto sched = c.schedule.build();
            SampleConfig scfg = c.sample;
            scfg.seed = sample_seed(c);
            const auto frames = sample_story(captions, model, sched, scfg, first);

            std::filesystem::create_directories(out_dir);
            nlohmann::json manifest = {{"mode", detail::sample_mode_name(scfg.mode)},
                                       {"lm", scfg.lm},
                                       {"w", scfg.w},
                                       {"seed", c.seed},
                                       {"frames", nlohmann::json::array()}};
            for (std::size_t t = 0; t < frames.size(); ++t) {
                char name[32];
                std::snprintf(name, sizeof name, "frame_%02zu.ppm", t + 1);
                write_ppm((std::filesystem::path(out_dir) / name).string(), tensor_pixels(frames[t]), g.height, g.width);
                manifest["frames"].push_back({{"index", t + 1},
                                              {"file", name},
                                              {"caption", captions[t]},
                                              {"caption_text", detail::caption_text(captions[t], vocab)},
                                              {"source", (t == 0 && first) ? "given" : "generated"}});
            }
            detail::write_text((std::filesystem::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
            write_resolved_config((std::filesystem::path(out_dir) / "resolved_config.json").string(), c);
            out << "wrote " << frames.size() << " frames to " << out_dir << "\n";
            return kExitOk;
        }

        if (eval->parsed()) {
            RunConfig c = detail::resolve(common);
            if (eval_n) c.eval.n_stories = *eval_n;
            if (eval_lm) c.sample.lm = *eval_lm;
            if (eval_w) c.sample.w = *eval_w;
            c.sample.mode = SampleMode::Visualization;
            c.validate();
            Dataset ds = read_dataset(eval_data);
            c.data = ds.config;
            if (c.eval.n_stories > ds.records.size())
                throw ConfigError("eval.n_stories (" + std::to_string(c.eval.n_stories) + ") exceeds dataset size " +
                                  std::to_string(ds.records.size()));
            StoryModel model = load_model(eval_ckpt);
            detail::check_model_matches_data(model.config, ds.config, "eval");
            const auto sched = c.schedule.build();
            SampleConfig scfg = c.sample;
            scfg.seed = sample_seed(c);
            const auto stories = detail::sample_stories(ds, c.eval.n_stories, model, sched, scfg);
            std::vector<Tensor> real, generated;
            double consistency = 0.0;
            for (std::size_t i = 0; i < stories.size(); ++i) {
                for (const auto& f : ds.records[i].frames) real.push_back(frame_tensor(f, ds.config));
                for (const auto& f : stories[i]) generated.push_back(f);
                consistency += background_consistency(stories[i], ds.records[i].scene, ds.config);
            }
            consistency /= static_cast<double>(stories.size());
            const double fid = proxy_fid(real, generated, c.eval.feat_seed);
            std::ostringstream csv;
            csv << kMetricsCsvHeader << '\n'
                << detail::fmt_double(fid) << ',' << detail::fmt_double(consistency) << ',' << stories.size() << ',' << c.seed
                << '\n';
            detail::write_text(eval_out, csv.str());
            write_resolved_config(eval_out + ".config.json", c);
            out << csv.str();
            return kExitOk;
        }

        if (bench->parsed()) {
            RunConfig c = detail::resolve(common);
            if (bench_L) c.bench.n_blocks = *bench_L;
            if (bench_lm) {
                if (*bench_lm == "full") {
                    c.bench.lm = std::nullopt;
                } else {
                    try {
                        std::size_t pos = 0;
                        const unsigned long v = std::stoul(*bench_lm, &pos);
                        if (pos != bench_lm->size()) throw std::invalid_argument("trailing");
                        c.bench.lm = v;
                    } catch (const std::exception&) {
                        throw ConfigError("--lm: expected a non-negative integer or 'full', got '" + *bench_lm + "'");
                    }
                }
            }
            if (bench_btok) c.bench.b_tok = *bench_btok;
            if (bench_d) c.bench.d = *bench_d;
            if (bench_iters) c.bench.iters = *bench_iters;
            c.validate();
            const auto& b = c.bench;
            std::ostringstream csv;
            csv << kBenchCsvHeader << '\n';
            auto row = [&](const BenchReport& r) {
                csv << (r.lm ? "window" : "full") << ',' << r.n_blocks << ',' << (r.lm ? std::to_string(*r.lm) : "") << ','
                    << r.b_tok << ',' << r.d << ',' << r.iters << ',' << detail::fmt_double(r.median_ns) << ','
                    << detail::fmt_double(r.mad_ns) << ',' << r.flops << ',' << r.allowed_pairs << '\n';
            };
            row(bench_attention(b.n_blocks, std::nullopt, b.b_tok, b.d, b.iters, c.seed));
            if (b.lm) row(bench_attention(b.n_blocks, b.lm, b.b_tok, b.d, b.iters, c.seed));
            detail::write_text(bench_out, csv.str());
            out << csv.str();
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    err << app.help();
    return kExitConfig;
}

}  // namespace causal_story
