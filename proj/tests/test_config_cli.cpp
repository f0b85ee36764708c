#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <causal_story/cli.hpp>

using namespace causal_story;
namespace fs = std::filesystem;

namespace {

struct CliTest : ::testing::Test {
    fs::path dir;

    void SetUp() override {
        dir = fs::temp_directory_path() /
              ("causal_story_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    void TearDown() override { fs::remove_all(dir); }

    std::string path(const std::string& name) const { return (dir / name).string(); }

    int run(std::vector<std::string> args) {
        out.str("");
        err.str("");
        return run_cli(args, out, err);
    }

    void write(const std::string& name, const std::string& text) const {
        std::ofstream os(path(name));
        os << text;
    }

    nlohmann::json read_json(const std::string& p) const {
        std::ifstream is(p);
        return nlohmann::json::parse(is);
    }

    /// Untrained checkpoint compatible with the default data config.
    std::string fresh_checkpoint() const {
        const auto p = path("model.ckpt");
        save_model(p, make_model(RunConfig{}.resolved_model(), 1));
        return p;
    }

    std::ostringstream out, err;
};

const char* kDefaults = R"({
  "seed": 0,
  "data": {"n_stories": 2000, "story_length": 5, "grid": 4, "n_backgrounds": 4, "n_characters": 4,
           "n_actions": 4, "max_characters": 2, "p_omit": 0.8, "caption_length": 12, "image_size": 16},
  "model": {"d_model": 64, "b_tok": 8, "n_cond_heads": 4, "n_blocks": 2, "mlp_ratio": 2,
            "adapter_enabled": false, "adapter_bottleneck": 8, "patch": 4, "init_std": 0.02},
  "schedule": {"steps": 100, "s": 0.008, "variance": "beta"},
  "train": {"optimizer": "adam", "lr": 0.001, "momentum": 0.9, "steps": 500, "batch_size": 8,
            "p_uncond": 0.1, "grad_clip": 0.0, "lm_train": null, "mode": "full"},
  "sample": {"w": 2.0, "lm": 4, "mode": "visualization"},
  "eval": {"n_stories": 64, "feat_seed": 0},
  "bench": {"L": 16, "lm": 2, "b_tok": 8, "d": 64, "iters": 30}
})";

}  // namespace

TEST(RunConfig, DefaultsMatchDocumentedTable) {
    EXPECT_EQ(to_json(RunConfig{}), nlohmann::json::parse(kDefaults));
}

TEST(RunConfig, JsonRoundTrip) {
    RunConfig c;
    apply_json(c, nlohmann::json::parse(R"({"seed": 9, "train": {"optimizer": "sgd", "lr": 0.01, "lm_train": 2},
                                            "bench": {"lm": null}, "schedule": {"variance": "posterior"}})"));
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.train.optimizer, Optimizer::Sgd);
    EXPECT_EQ(c.train.lm_train, std::optional<std::size_t>(2));
    EXPECT_FALSE(c.bench.lm.has_value());
    RunConfig d;
    apply_json(d, to_json(c));
    EXPECT_EQ(to_json(d), to_json(c));
}

TEST(RunConfig, ErrorsNameTheKeyPath) {
    RunConfig c;
    try {
        apply_json(c, nlohmann::json::parse(R"({"train": {"lr": "fast"}})"));
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train.lr"), std::string::npos) << e.what();
    }
    try {
        apply_json(c, nlohmann::json::parse(R"({"model": {"depth": 3}})"));
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("model.depth"), std::string::npos) << e.what();
    }
    c = {};
    c.train.p_uncond = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfig, SeedStreamsAreDistinct) {
    RunConfig c;
    c.seed = 3;
    EXPECT_NE(data_seed(c), init_seed(c));
    EXPECT_NE(train_seed(c), sample_seed(c));
    EXPECT_EQ(data_seed(c), derive_seed(3, "data"));
}

TEST_F(CliTest, MissingConfigFileIsExitTwoNamingPath) {
    EXPECT_EQ(run({"gen-data", "--config", path("nope.json"), "--out", path("d.jsonl")}), 2);
    EXPECT_NE(err.str().find(path("nope.json")), std::string::npos);
}

TEST_F(CliTest, UnknownKeyIsExitTwo) {
    write("c.json", R"({"data": {"n_storeys": 3}})");
    EXPECT_EQ(run({"gen-data", "--config", path("c.json"), "--out", path("d.jsonl")}), 2);
    EXPECT_NE(err.str().find("data.n_storeys"), std::string::npos);
}

TEST_F(CliTest, UnknownSubcommandIsExitTwoWithUsage) {
    EXPECT_EQ(run({"frobnicate"}), 2);
    EXPECT_NE(err.str().find("gen-data"), std::string::npos);
    EXPECT_EQ(run({}), 2);
    EXPECT_EQ(run({"--help"}), 0);
    EXPECT_NE(out.str().find("bench"), std::string::npos);
}

TEST_F(CliTest, GenDataWritesDatasetAndDefaultsDump) {
    EXPECT_EQ(run({"gen-data", "--seed", "4", "--count", "3", "--out", path("d.jsonl")}), 0) << err.str();
    const auto ds = read_dataset(path("d.jsonl"));
    EXPECT_EQ(ds.records.size(), 3u);
    auto expect = nlohmann::json::parse(kDefaults);
    expect["seed"] = 4;
    expect["data"]["n_stories"] = 3;
    EXPECT_EQ(read_json(path("d.jsonl.config.json")), expect);
    EXPECT_EQ(run({"gen-data", "--n-stories", "0", "--out", path("e.jsonl")}), 2);
}

TEST_F(CliTest, LmFlagOverridesConfigFile) {
    const auto ckpt = fresh_checkpoint();
    write("c.json", R"({"sample": {"lm": 4, "w": 1.0}, "schedule": {"steps": 4}})");
    write("caps.json", R"({"captions": ["snow fox act0 row0 col0", "fox act1 row1 col0"]})");
    EXPECT_EQ(run({"sample", "--config", path("c.json"), "--ckpt", ckpt, "--captions-file", path("caps.json"), "--lm", "2",
                   "--out-dir", path("out")}),
              0)
        << err.str();
    EXPECT_EQ(read_json(path("out/resolved_config.json"))["sample"]["lm"], 2);
    const auto manifest = read_json(path("out/manifest.json"));
    EXPECT_EQ(manifest["frames"].size(), 2u);
    EXPECT_EQ(manifest["frames"][0]["caption_text"], "snow fox act0 row0 col0");
    EXPECT_TRUE(fs::exists(path("out/frame_02.ppm")));
}

TEST_F(CliTest, ContinuationContract) {
    const auto ckpt = fresh_checkpoint();
    write("c.json", R"({"schedule": {"steps": 4}})");
    write("caps.json", R"({"captions": ["snow fox act0 row0 col0", "fox act1 row1 col0", "fox act1 row1 col1"]})");
    const std::vector<std::string> base{"sample", "--config", path("c.json"), "--ckpt", ckpt, "--captions-file", path("caps.json")};

    auto with = [&](std::vector<std::string> extra) {
        auto a = base;
        a.insert(a.end(), extra.begin(), extra.end());
        return a;
    };
    EXPECT_EQ(run(with({"--mode", "continuation", "--out-dir", path("a")})), 2);
    EXPECT_FALSE(fs::exists(path("a")));

    const GeneratorConfig g;
    const auto first = generate_story(1, g).frames[0];
    write_ppm(path("first.ppm"), first, 16, 16);
    EXPECT_EQ(run(with({"--first-frame", path("first.ppm"), "--out-dir", path("b")})), 2);

    EXPECT_EQ(run(with({"--mode", "continuation", "--first-frame", path("first.ppm"), "--out-dir", path("c")})), 0)
        << err.str();
    EXPECT_EQ(read_ppm(path("c/frame_01.ppm"), 16, 16), first);
    const auto manifest = read_json(path("c/manifest.json"));
    ASSERT_EQ(manifest["frames"].size(), 3u);
    EXPECT_EQ(manifest["frames"][0]["source"], "given");
    EXPECT_EQ(manifest["frames"][1]["source"], "generated");
    EXPECT_EQ(manifest["frames"][2]["source"], "generated");
    EXPECT_EQ(run(with({"--mode", "sideways", "--out-dir", path("d")})), 2);
}

TEST_F(CliTest, BenchCsvHeader) {
    EXPECT_EQ(run({"bench", "--L", "4", "--lm", "1", "--btok", "2", "--d", "8", "--iters", "30", "--out", path("b.csv")}), 0)
        << err.str();
    std::ifstream is(path("b.csv"));
    std::string header, full, window;
    std::getline(is, header);
    std::getline(is, full);
    std::getline(is, window);
    EXPECT_EQ(header, "mask,n_blocks,lm,b_tok,d,iters,median_ns,mad_ns,flops,allowed_pairs");
    EXPECT_EQ(full.rfind("full,4,,2,8,30,", 0), 0u) << full;
    EXPECT_EQ(window.rfind("window,4,1,2,8,30,", 0), 0u) << window;
    EXPECT_EQ(run({"bench", "--lm", "two", "--out", path("b.csv")}), 2);
    EXPECT_EQ(run({"bench", "--iters", "10", "--out", path("b.csv")}), 2);
}

TEST_F(CliTest, TrainAndEvalSmallRun) {
    write("c.json", R"({"schedule": {"steps": 4}, "train": {"batch_size": 2}})");
    ASSERT_EQ(run({"gen-data", "--config", path("c.json"), "--count", "4", "--out", path("d.jsonl")}), 0) << err.str();
    ASSERT_EQ(run({"train", "--config", path("c.json"), "--data", path("d.jsonl"), "--steps", "3", "--out-ckpt", path("m.ckpt")}),
              0)
        << err.str();
    std::ifstream log(path("m.ckpt.log.csv"));
    std::string line;
    std::getline(log, line);
    EXPECT_EQ(line, "step,loss,wall_time_s");
    int rows = 0;
    while (std::getline(log, line)) ++rows;
    EXPECT_EQ(rows, 3);

    ASSERT_EQ(run({"eval", "--config", path("c.json"), "--ckpt", path("m.ckpt"), "--data", path("d.jsonl"), "--n-stories", "4",
                   "--out", path("metrics.csv")}),
              0)
        << err.str();
    std::ifstream m(path("metrics.csv"));
    std::getline(m, line);
    EXPECT_EQ(line, "proxy_fid,background_consistency,n_stories,seed");
    std::getline(m, line);
    EXPECT_NE(line.find(",4,0"), std::string::npos) << line;

    EXPECT_EQ(run({"eval", "--config", path("c.json"), "--ckpt", path("m.ckpt"), "--data", path("d.jsonl"), "--n-stories", "9",
                   "--out", path("x.csv")}),
              2);
    EXPECT_EQ(run({"train", "--data", path("d.jsonl"), "--adapter-only", "--out-ckpt", path("a.ckpt")}), 2);
    EXPECT_EQ(run({"train", "--data", path("missing.jsonl"), "--out-ckpt", path("a.ckpt")}), 1);
}

TEST_F(CliTest, AdapterOnlyTrainingFromBase) {
    write("c.json", R"({"schedule": {"steps": 4}, "train": {"batch_size": 2}})");
    ASSERT_EQ(run({"gen-data", "--config", path("c.json"), "--count", "3", "--out", path("d.jsonl")}), 0);
    ASSERT_EQ(run({"train", "--config", path("c.json"), "--data", path("d.jsonl"), "--steps", "2", "--out-ckpt", path("base.ckpt")}),
              0);
    ASSERT_EQ(run({"train", "--config", path("c.json"), "--data", path("d.jsonl"), "--steps", "2", "--adapter-only",
                   "--base-ckpt", path("base.ckpt"), "--out-ckpt", path("ad.ckpt")}),
              0)
        << err.str();
    const auto base = load_model(path("base.ckpt"));
    const auto tuned = load_model(path("ad.ckpt"));
    EXPECT_TRUE(tuned.config.adapter_enabled);
    for (const auto& [name, t] : base.params.entries()) {
        const auto& u = tuned.params.at(name);
        EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), u.data().begin())) << name;
    }
}
