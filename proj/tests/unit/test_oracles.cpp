#include <gtest/gtest.h>

#include "cafbifpn/oracles.hpp"
#include "cafbifpn/selfcheck.hpp"

using namespace cafbifpn;
using oracles::AttentionMode;

TEST(TopkReference, InspectionAndTieRule) {
  EXPECT_EQ(oracles::topk_reference({5, 1, 9}, 2), (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(oracles::topk_reference({4, 4, 4, 4}, 3), (std::vector<std::size_t>{0, 1, 2}));
}

TEST(TopkReference, AgreesWithRoutingOnLongRows) {
  SplitMix64 rng(1);
  const Tensor q = Tensor::uniform({64, 3}, rng), k = Tensor::uniform({64, 3}, rng);
  const RoutingResult r = topk_routing(q, k, 7);
  for (std::size_t row = 0; row < 64; ++row) {
    std::vector<double> a(64);
    for (std::size_t j = 0; j < 64; ++j) a[j] = r.affinity.at(row, j);
    ASSERT_EQ(r.indices.row(row), oracles::topk_reference(a, 7)) << "row " << row;
  }
}

TEST(FiniteDiff, SumOfSquares) {
  const auto fn = [](const Tensor& x) { return sum(mul(x, x)); };
  const Tensor g = oracles::finite_diff_grad(fn, Tensor({2}, std::vector<double>{1, 2}), 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-7);
  EXPECT_NEAR(g[1], 4.0, 1e-7);
}

TEST(FiniteDiff, LinearFunctionIsExactToRoundoff) {
  const Tensor c({3}, std::vector<double>{0.5, -2.0, 3.25});
  const auto fn = [&](const Tensor& x) { return sum(mul(c, x)); };
  const Tensor g = oracles::finite_diff_grad(fn, Tensor({3}, std::vector<double>{1, 1, 1}), 1e-3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], c[i], 1e-10);
}

TEST(FiniteDiff, NonFiniteEvaluationThrows) {
  const auto fn = [](const Tensor& x) { return x[0] > 0.0 ? INFINITY : 0.0; };
  EXPECT_THROW(oracles::finite_diff_grad(fn, Tensor({1}, std::vector<double>{0.0}), 1e-3), NumericError);
}

TEST(FiniteDiff, AgreesWithTapeOnConvolution) {
  SplitMix64 rng(2);
  const Conv2dParams p = random_conv(2, 2, 3, 3, rng);
  const Tensor x = Tensor::uniform({2, 4, 4}, rng);
  Tape t;
  Var xv = t.leaf(x);
  const Tensor analytic = t.backward(ad::sum(ad::conv2d(xv, ad::bind(t, p, false))), Tensor::scalar(1.0)).of(xv);
  const Tensor numeric = oracles::finite_diff_grad([&](const Tensor& v) { return sum(conv2d(v, p)); }, x, 1e-5);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(gradient_error(analytic[i], numeric[i]), 1e-5);
}

TEST(AttentionFlops, FullRoutingEqualsDenseLogits) {
  const auto dense = oracles::attention_flops(8, 8, 4, 1, 1, 1, AttentionMode::dense);
  const auto routed = oracles::attention_flops(8, 8, 4, 2, 4, 1, AttentionMode::routed);
  EXPECT_EQ(routed.qk_logits, dense.qk_logits);
  EXPECT_EQ(routed.av_aggregation, dense.av_aggregation);
}

TEST(AttentionFlops, RatioIsKOverSSquared) {
  const auto dense = oracles::attention_flops(16, 16, 8, 1, 1, 1, AttentionMode::dense);
  const auto routed = oracles::attention_flops(16, 16, 8, 4, 2, 1, AttentionMode::routed);
  EXPECT_EQ(static_cast<double>(routed.qk_logits) / static_cast<double>(dense.qk_logits), 0.125);
  EXPECT_EQ(routed.qk_logits * 16, dense.qk_logits * 2);
}

TEST(AttentionFlops, MatchesRuntimeCounters) {
  SplitMix64 rng(3);
  for (auto [S, k] : {std::pair<std::size_t, std::size_t>{2, 2}, {4, 2}, {2, 4}, {4, 16}}) {
    const BraParams p = random_bra(4, S, k, 2, rng, false, 5);
    MacCounts runtime;
    ad::BaOptions opt;
    opt.macs = &runtime;
    ba_forward(Tensor::uniform({4, 16, 16}, rng), p, opt);
    EXPECT_EQ(runtime, oracles::attention_flops(16, 16, 4, S, k, 2, AttentionMode::routed, 5)) << S << "," << k;
  }
}

TEST(AttentionFlops, DenseCountsMatchDenseOracleTally) {
  SplitMix64 rng(4);
  const BraParams p = random_bra(4, 1, 1, 1, rng);
  MacCounts tally;
  oracles::dense_attention_reference(Tensor::uniform({4, 6, 6}, rng), p, &tally);
  EXPECT_EQ(tally, oracles::attention_flops(6, 6, 4, 1, 1, 1, AttentionMode::dense));
}

TEST(DenseAttentionReference, SinglePixelReturnsProjectedValue) {
  SplitMix64 rng(5);
  const Tensor f = Tensor::uniform({3, 1, 1}, rng);
  const BraParams p = random_bra(3, 1, 1, 1, rng);
  const Tensor out = oracles::dense_attention_reference(f, p);
  for (std::size_t d = 0; d < 3; ++d) {
    double v = 0.0;
    for (std::size_t c = 0; c < 3; ++c) v += f[c] * p.w_v.at(c, d);
    EXPECT_NEAR(out[d], v, 1e-15);
  }
}

TEST(DenseAttentionReference, IdenticalTokensGiveCommonValue) {
  SplitMix64 rng(6);
  Tensor f({2, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) {
    f[i] = 0.3;
    f[9 + i] = -1.1;
  }
  const BraParams p = random_bra(2, 1, 1, 2, rng);
  const Tensor out = oracles::dense_attention_reference(f, p);
  for (std::size_t d = 0; d < 2; ++d) {
    const double v = 0.3 * p.w_v.at(0, d) - 1.1 * p.w_v.at(1, d);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(out[d * 9 + i], v, 1e-15);
  }
}

TEST(DenseAttentionReference, HeadsMustDivideChannels) {
  SplitMix64 rng(7);
  const BraParams p = random_bra(3, 1, 1, 2, rng);
  EXPECT_THROW(oracles::dense_attention_reference(Tensor({3, 2, 2}), p), ConfigError);
}

TEST(Oracles, Deterministic) {
  SplitMix64 a(8), b(8);
  const AttentionCase ca = draw_full_routing_case(a), cb = draw_full_routing_case(b);
  EXPECT_TRUE(bit_identical(oracles::dense_attention_reference(ca.input, ca.params),
                            oracles::dense_attention_reference(cb.input, cb.params)));
  EXPECT_TRUE(bit_identical(oracles::ba_reference(ca.input, ca.params), oracles::ba_reference(cb.input, cb.params)));
}
