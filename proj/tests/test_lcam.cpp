#include <gtest/gtest.h>

#include <causal_story/lcam.hpp>

#include "oracles.hpp"

using namespace causal_story;
using cs_test::random_tensor;

namespace {

std::vector<std::vector<int>> allowed_pattern(const MaskMatrix& m) {
    std::vector<std::vector<int>> p(m.n_rows(), std::vector<int>(m.n_cols()));
    for (std::size_t i = 0; i < m.n_rows(); ++i)
        for (std::size_t j = 0; j < m.n_cols(); ++j) p[i][j] = m.allowed(i, j);
    return p;
}

}  // namespace

TEST(TrainMask, SingleTokenAllowsSelf) {
    const auto m = build_train_mask({1});
    EXPECT_EQ(m.bias(0, 0), 0.0);
}

TEST(TrainMask, LowerTriangularOverSingletons) {
    EXPECT_EQ(allowed_pattern(build_train_mask({1, 1, 1})),
              (std::vector<std::vector<int>>{{1, 0, 0}, {1, 1, 0}, {1, 1, 1}}));
}

TEST(TrainMask, BlockGranularity) {
    EXPECT_EQ(allowed_pattern(build_train_mask({2, 1})),
              (std::vector<std::vector<int>>{{1, 1, 0}, {1, 1, 0}, {1, 1, 1}}));
}

TEST(TrainMask, EmptyOrZeroBlocksRejected) {
    EXPECT_THROW(build_train_mask({}), ConfigError);
    EXPECT_THROW(build_train_mask({2, 0}), ConfigError);
}

TEST(InferenceMask, WindowOfOne) {
    const auto m = build_inference_mask({1, 1, 1, 1, 1}, 1);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(m.allowed(4, j), j == 3 || j == 4);
}

TEST(InferenceMask, ZeroWindowIsBlockDiagonal) {
    EXPECT_EQ(allowed_pattern(build_inference_mask({2, 1}, 0)),
              (std::vector<std::vector<int>>{{1, 1, 0}, {1, 1, 0}, {0, 0, 1}}));
}

TEST(InferenceMask, LargeWindowEqualsTrainMask) {
    const std::vector<std::size_t> sizes{2, 3, 1, 2};
    for (std::size_t w : {3u, 4u, 100u})
        EXPECT_EQ(build_inference_mask(sizes, w).bias_values(), build_train_mask(sizes).bias_values());
}

TEST(Masks, ExhaustiveAgainstDefinition) {
    std::size_t layouts = 0, bad = 0;
    cs_test::for_each_block_layout(8, 3, [&](const std::vector<std::size_t>& sizes) {
        ++layouts;
        bad += cs_test::mask_definition_mismatches(build_train_mask(sizes), sizes, std::nullopt);
        for (std::size_t w = 0; w <= 8; ++w)
            bad += cs_test::mask_definition_mismatches(build_inference_mask(sizes, w), sizes, w);
    });
    EXPECT_EQ(layouts, 9840u);
    EXPECT_EQ(bad, 0u);
}

TEST(Masks, WindowsAreNested) {
    const std::vector<std::size_t> sizes{1, 2, 3, 1, 2, 1};
    const auto full = build_train_mask(sizes);
    for (std::size_t w = 0; w < 6; ++w) {
        const auto a = build_inference_mask(sizes, w), b = build_inference_mask(sizes, w + 1);
        for (std::size_t i = 0; i < a.n_rows(); ++i)
            for (std::size_t j = 0; j < a.n_cols(); ++j) {
                if (a.allowed(i, j)) { EXPECT_TRUE(b.allowed(i, j)); }
                if (b.allowed(i, j)) { EXPECT_TRUE(full.allowed(i, j)); }
            }
    }
}

TEST(MaskedAttention, SingleTokenReturnsValue) {
    Rng rng(1);
    auto q = random_tensor({1, 4}, rng), k = random_tensor({1, 4}, rng), v = random_tensor({1, 4}, rng);
    const auto out = masked_attention({q, k, v, 1}, build_train_mask({1}));
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out[c], v[c]);
}

TEST(MaskedAttention, SelfOnlyMaskReturnsValues) {
    Rng rng(2);
    auto q = random_tensor({4, 3}, rng), k = random_tensor({4, 3}, rng), v = random_tensor({4, 3}, rng);
    const auto out = masked_attention({q, k, v, 1}, build_inference_mask({1, 1, 1, 1}, 0));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(out[i], v[i]);
}

TEST(MaskedAttention, SixTokenBruteForce) {
    Rng rng(3);
    const auto mask = build_train_mask({2, 1, 3});
    auto q = random_tensor({6, 4}, rng), k = random_tensor({6, 4}, rng), v = random_tensor({6, 4}, rng);
    const auto got = masked_attention({q, k, v, 1}, mask);
    const auto want = cs_test::brute_force_attention(q, k, v, 1, mask);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
}

TEST(MaskedAttention, HundredRandomInstancesMatchOracle) {
    EXPECT_LE(cs_test::attention_oracle_error(100, 4), 1e-10);
}

TEST(MaskedAttention, MaskShapeMismatch) {
    Rng rng(5);
    auto q = random_tensor({3, 2}, rng);
    EXPECT_THROW(masked_attention({q, q, q, 1}, build_train_mask({1, 1})), DimensionError);
}

TEST(MaskedAttention, FutureAndOutOfWindowRowsHaveNoEffect) {
    Rng rng(6);
    const std::vector<std::size_t> sizes{2, 2, 2, 2, 2};
    const std::size_t window = 1;
    const auto mask = build_inference_mask(sizes, window);
    auto q = random_tensor({10, 4}, rng), k = random_tensor({10, 4}, rng), v = random_tensor({10, 4}, rng);
    const auto base = masked_attention({q, k, v, 2}, mask);
    // Perturb block 0 (outside the window of block 2+) and block 4 (future of blocks 0..3).
    Tensor k2 = k.clone(), v2 = v.clone();
    for (std::size_t c = 0; c < 4; ++c) {
        for (std::size_t r : {0u, 1u, 8u, 9u}) {
            k2.mutable_data()[r * 4 + c] += 3.0;
            v2.mutable_data()[r * 4 + c] -= 2.0;
        }
    }
    const auto moved = masked_attention({q, k2, v2, 2}, mask);
    for (std::size_t i = 4; i < 8; ++i)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(moved[i * 4 + c], base[i * 4 + c]);
}

TEST(AttentionCost, SingleBlockEqualsDense) {
    const std::size_t b = 8, d = 64;
    EXPECT_EQ(attention_cost(1, b, d, std::nullopt), b * b * (4 * d + kSoftmaxFlopsPerEntry));
    EXPECT_EQ(attention_cost(1, b, d, 0), attention_cost(1, b, d, std::nullopt));
}

TEST(AttentionCost, BlockDiagonalIsOneThirdOfFull) {
    for (std::size_t b : {1u, 3u, 8u}) {
        const auto diag = attention_cost(5, b, 16, 0), full = attention_cost(5, b, 16, std::nullopt);
        EXPECT_EQ(diag * 3, full);
    }
}

TEST(AttentionCost, WindowTwoOfFiveIsTwelveFifteenths) {
    for (std::size_t b : {1u, 2u, 8u})
        for (std::size_t d : {4u, 64u}) {
            const auto w = attention_cost(5, b, d, 2), full = attention_cost(5, b, d, std::nullopt);
            EXPECT_LT(w, full);
            EXPECT_EQ(w * 15, full * 12);
        }
}

TEST(AttentionCost, MatchesAllowedPairs) {
    const std::vector<std::size_t> sizes(16, 8);
    const auto m = build_inference_mask(sizes, 2);
    EXPECT_EQ(attention_cost(16, 8, 64, 2), m.allowed_pairs() * (4 * 64 + kSoftmaxFlopsPerEntry));
}
