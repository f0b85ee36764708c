#include <gtest/gtest.h>

#include <cmath>

#include <causal_story/eval_bench.hpp>

#include "test_util.hpp"

using namespace causal_story;
using cs_test::random_tensor;

namespace {

// feature_extract of an all-zero 3x16x16 frame at feat_seed 0, first 4 entries.
constexpr double kZeroFrameFeatures[4] = {0.10879443811191065, 0.0017062642711344503, -0.033622904004943853,
                                          -0.079079906078302467};

GaussianStats diag_stats(const std::vector<double>& mu, const std::vector<double>& var) {
    GaussianStats s;
    s.mu = Eigen::Map<const Eigen::VectorXd>(mu.data(), static_cast<Eigen::Index>(mu.size()));
    s.sigma = Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(var.data(), static_cast<Eigen::Index>(var.size()))).asDiagonal();
    s.n = 100;
    return s;
}

GaussianStats random_stats(Rng& rng, int d) {
    Eigen::MatrixXd x(3 * d, d);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    return fit_gaussian(x);
}

}  // namespace

TEST(FeatureExtract, DeterministicAndSeeded) {
    Rng rng(1);
    Tensor f = random_tensor({3, 16, 16}, rng, 0.5);
    const auto a = feature_extract({f, f}, 0);
    EXPECT_EQ(a.rows(), 2);
    EXPECT_EQ(a.cols(), static_cast<Eigen::Index>(kFeatureDim));
    EXPECT_EQ(a.row(0), a.row(1));
    EXPECT_NE(feature_extract({f}, 1).row(0), a.row(0));
}

TEST(FeatureExtract, ZeroFrameRegression) {
    const auto z = feature_extract({Tensor({3, 16, 16}, 0.0)}, 0);
    for (int k = 0; k < 4; ++k) EXPECT_NEAR(z(0, k), kZeroFrameFeatures[k], 1e-12);
}

TEST(FitGaussian, SymmetricPairAndConstant) {
    Eigen::MatrixXd x(2, 3);
    x << 1, -2, 3, -1, 2, -3;
    EXPECT_LE(fit_gaussian(x).mu.norm(), 0.0);
    Eigen::MatrixXd c = Eigen::MatrixXd::Constant(5, 3, 0.7);
    const auto s = fit_gaussian(c);
    EXPECT_EQ(s.sigma.norm(), 0.0);
    EXPECT_FALSE(s.diagonal);
    EXPECT_TRUE(fit_gaussian(Eigen::MatrixXd::Constant(3, 3, 0.7)).diagonal);
    EXPECT_THROW(fit_gaussian(Eigen::MatrixXd(1, 3)), StatsError);
}

TEST(FitGaussian, UnbiasedCovariance) {
    Eigen::MatrixXd x(3, 1);
    x << 1, 2, 6;
    EXPECT_DOUBLE_EQ(fit_gaussian(x).sigma(0, 0), 7.0);
}

TEST(FitGaussian, MonteCarloIdentity) {
    Rng rng(12);
    Eigen::MatrixXd x(10000, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    const auto s = fit_gaussian(x);
    EXPECT_FALSE(s.diagonal);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(s.sigma(i, j), i == j ? 1.0 : 0.0, 0.05);
    EXPECT_LE((s.sigma - s.sigma.transpose()).norm(), 1e-12);
}

TEST(Frechet, IdentityAndMeanShift) {
    Rng rng(3);
    const auto a = random_stats(rng, 5);
    EXPECT_EQ(frechet_distance(a, a), 0.0);
    GaussianStats b = a;
    Eigen::VectorXd delta(5);
    delta << 0.5, -1.0, 0.25, 0.0, 2.0;
    b.mu += delta;
    EXPECT_NEAR(frechet_distance(a, b), delta.squaredNorm(), 1e-8);
}

TEST(Frechet, DiagonalClosedForm) {
    Rng rng(4);
    for (int inst = 0; inst < 20; ++inst) {
        std::vector<double> m1(6), m2(6), v1(6), v2(6);
        double expect = 0.0;
        for (int i = 0; i < 6; ++i) {
            m1[i] = rng.normal();
            m2[i] = rng.normal();
            v1[i] = rng.uniform(0.01, 3.0);
            v2[i] = rng.uniform(0.01, 3.0);
            expect += (m1[i] - m2[i]) * (m1[i] - m2[i]) + std::pow(std::sqrt(v1[i]) - std::sqrt(v2[i]), 2);
        }
        EXPECT_NEAR(frechet_distance(diag_stats(m1, v1), diag_stats(m2, v2)), expect, 1e-8);
    }
}

TEST(Frechet, SymmetricAndNonNegative) {
    Rng rng(5);
    for (int inst = 0; inst < 20; ++inst) {
        const auto a = random_stats(rng, 8), b = random_stats(rng, 8);
        const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
        EXPECT_NEAR(ab, ba, 1e-10);
        EXPECT_GE(ab, 0.0);
    }
}

TEST(Frechet, Errors) {
    auto a = diag_stats({0, 0}, {1, 1});
    EXPECT_THROW(frechet_distance(a, diag_stats({0, 0, 0}, {1, 1, 1})), DimensionError);
    auto bad = diag_stats({0, 0}, {1, -0.5});
    EXPECT_THROW(frechet_distance(a, bad), StatsError);
}

TEST(ProxyFid, RealHalvesCloserThanNoise) {
    const GeneratorConfig cfg;
    std::vector<Tensor> a, b, noise;
    Rng rng(6);
    std::size_t i = 0;
    for (const auto& r : generate_corpus(7, 80, cfg))
        for (const auto& px : r.frames) (i++ % 2 ? a : b).push_back(frame_tensor(px, cfg));
    for (std::size_t k = 0; k < a.size(); ++k) {
        Tensor t({3, 16, 16});
        for (auto& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
        noise.push_back(t);
    }
    EXPECT_LT(proxy_fid(a, b, 0), proxy_fid(a, noise, 0));
}

TEST(BackgroundConsistency, GroundTruthWrongColorAndNoise) {
    const GeneratorConfig cfg;
    const auto r = generate_story(8, cfg);
    std::vector<Tensor> gt;
    for (const auto& px : r.frames) gt.push_back(frame_tensor(px, cfg));
    EXPECT_EQ(background_consistency(gt, r.scene, cfg), 1.0);

    const int wrong = (r.scene.background + 1) % 4;
    std::vector<Tensor> bad;
    for (const auto& f : r.scene.frames) bad.push_back(frame_tensor(render_frame(wrong, f, cfg), cfg));
    EXPECT_EQ(background_consistency(bad, r.scene, cfg), 0.0);

    // Each channel accepts a window of width 0.5 inside [-1, 1], so a uniform
    // pixel passes with probability (0.5 / 2)^3 = 1/64.
    Rng rng(9);
    double total = 0.0;
    const int trials = 400;
    for (int k = 0; k < trials; ++k) {
        std::vector<Tensor> frames;
        for (int f = 0; f < 5; ++f) {
            Tensor t({3, 16, 16});
            for (auto& v : t.mutable_data()) v = rng.uniform(-1.0, 1.0);
            frames.push_back(t);
        }
        total += background_consistency(frames, r.scene, cfg);
    }
    EXPECT_NEAR(total / trials, 1.0 / 64.0, 0.002);
}

TEST(Bootstrap, LowerBound) {
    std::vector<double> all_pos(50, 1.0);
    EXPECT_EQ(bootstrap_mean_lower(all_pos, 0.95, 1000, 1), 1.0);
    Rng rng(10);
    std::vector<double> centered(200);
    for (auto& v : centered) v = rng.normal();
    const double lo = bootstrap_mean_lower(centered, 0.95, 2000, 2);
    double mean = 0.0;
    for (double v : centered) mean += v;
    mean /= 200.0;
    EXPECT_NEAR(lo, mean - 1.96 / std::sqrt(200.0), 0.04);
    EXPECT_THROW(bootstrap_mean_lower({}, 0.95, 10, 0), StatsError);
}

TEST(Bench, ReportFieldsAndCounts) {
    const auto full = bench_attention(5, std::nullopt, 2, 8, 30);
    const auto win = bench_attention(5, 2, 2, 8, 30);
    EXPECT_EQ(win.flops * 15, full.flops * 12);
    EXPECT_EQ(bench_attention(5, 4, 2, 8, 30).flops, full.flops);
    EXPECT_EQ(full.allowed_pairs, 15u * 4u);
    EXPECT_GT(full.median_ns, 0.0);
    EXPECT_THROW(bench_attention(5, 2, 2, 8, 29), ConfigError);
}
