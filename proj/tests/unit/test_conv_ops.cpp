#include <cmath>

#include <gtest/gtest.h>

#include "cafbifpn/autodiff.hpp"
#include "cafbifpn/conv.hpp"
#include "cafbifpn/gradcheck.hpp"
#include "cafbifpn/oracles.hpp"
#include "cafbifpn/selfcheck.hpp"

using namespace cafbifpn;

TEST(Conv2d, OneByOneIdentityKernel) {
  SplitMix64 rng(1);
  const Tensor x = Tensor::uniform({3, 5, 4}, rng);
  Conv2dParams p = make_conv(3, 3, 1, 1);
  for (std::size_t c = 0; c < 3; ++c) p.weights.at(c, c, 0, 0) = 1.0;
  EXPECT_EQ(conv2d(x, p), x);
}

TEST(Conv2d, AllOnesKernelCountsNeighbours) {
  Conv2dParams p = make_conv(1, 1, 3, 3);
  p.weights = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(Tensor::full({1, 5, 5}, 1.0), p);
  ASSERT_EQ(y.dims(), (Dims{1, 5, 5}));
  EXPECT_EQ(y.at(0, 2, 2), 9.0);
  EXPECT_EQ(y.at(0, 0, 0), 4.0);
  EXPECT_EQ(y.at(0, 0, 2), 6.0);
}

TEST(Conv2d, DilatedPaddedCaseMatchesLoopOracle) {
  SplitMix64 rng(2);
  const Tensor x = Tensor::uniform({3, 8, 8}, rng);
  const Conv2dParams p = random_conv(2, 3, 3, 3, rng, 2);
  EXPECT_EQ(p.padding.h, 2u);
  const Tensor y = conv2d(x, p);
  EXPECT_EQ(y.dims(), (Dims{2, 8, 8}));
  EXPECT_LE(max_abs_diff(y, oracles::conv2d_reference(x, p)), 1e-12);
}

TEST(Conv2d, RandomDrawsMatchLoopOracle) {
  SplitMix64 rng(3);
  for (int i = 0; i < 100; ++i) {
    const ConvCase c = draw_conv_case(rng);
    ASSERT_LE(max_abs_diff(conv2d(c.input, c.params), oracles::conv2d_reference(c.input, c.params)), 1e-12) << "draw " << i;
  }
}

TEST(Conv2d, StrideAndAsymmetricKernelExtents) {
  SplitMix64 rng(4);
  Conv2dParams p = random_conv(2, 1, 1, 3, rng);
  EXPECT_EQ(p.padding.h, 0u);
  EXPECT_EQ(p.padding.w, 1u);
  p.stride = 2;
  EXPECT_EQ(conv2d(Tensor::uniform({1, 7, 6}, rng), p).dims(), (Dims{2, 4, 3}));
}

TEST(Conv2d, NonPositiveExtentThrows) {
  Conv2dParams p = make_conv(1, 1, 5, 5);
  p.padding = {};
  EXPECT_THROW(conv2d(Tensor({1, 3, 3}), p), ShapeError);
  EXPECT_THROW(conv2d(Tensor({2, 5, 5}), make_conv(1, 1, 3, 3)), ShapeError);
}

TEST(Depthwise, OneByOneUnitKernelIsIdentity) {
  SplitMix64 rng(5);
  const Tensor x = Tensor::uniform({4, 6, 6}, rng);
  EXPECT_EQ(depthwise_conv2d(x, Tensor::full({4, 1, 1}, 1.0), 0), x);
}

TEST(Depthwise, CentreDeltaIsIdentity) {
  SplitMix64 rng(6);
  const Tensor x = Tensor::uniform({3, 5, 7}, rng);
  Tensor k({3, 5, 5});
  for (std::size_t c = 0; c < 3; ++c) k.at(c, 2, 2) = 1.0;
  EXPECT_EQ(depthwise_conv2d(x, k, 2), x);
}

TEST(Depthwise, RandomCaseMatchesOracle) {
  SplitMix64 rng(7);
  const Tensor x = Tensor::uniform({4, 6, 6}, rng);
  const Tensor k = Tensor::uniform({4, 5, 5}, rng);
  EXPECT_LE(max_abs_diff(depthwise_conv2d(x, k, 2), oracles::depthwise_reference(x, k)), 1e-12);
}

TEST(Depthwise, RejectsEvenKernelAndChannelMismatch) {
  EXPECT_THROW(depthwise_conv2d(Tensor({2, 4, 4}), Tensor({2, 2, 2}), 0), ConfigError);
  EXPECT_THROW(depthwise_conv2d(Tensor({2, 4, 4}), Tensor({3, 3, 3}), 1), ShapeError);
}

TEST(Bilinear, LatticePointReturnsStoredValue) {
  const Tensor x = Tensor::iota({2, 3, 3});
  const auto v = bilinear_sample(x, 1.0, 2.0);
  EXPECT_EQ(v[0], x.at(0, 1, 2));
  EXPECT_EQ(v[1], x.at(1, 1, 2));
}

TEST(Bilinear, MidpointAveragesFourNeighbours) {
  const Tensor x = Tensor::iota({1, 3, 3});
  const double want = (x.at(0, 0, 0) + x.at(0, 0, 1) + x.at(0, 1, 0) + x.at(0, 1, 1)) / 4.0;
  EXPECT_DOUBLE_EQ(bilinear_sample(x, 0.5, 0.5)[0], want);
  EXPECT_DOUBLE_EQ(bilinear_sample(x, 2.0, 1.5)[0], (x.at(0, 2, 1) + x.at(0, 2, 2)) / 2.0);
}

TEST(Bilinear, OutsideReadsZeroAndMatchesOracle) {
  SplitMix64 rng(8);
  const Tensor x = Tensor::uniform({2, 4, 5}, rng);
  EXPECT_EQ(bilinear_sample(x, -1.0, -1.0)[0], 0.0);
  for (int i = 0; i < 200; ++i) {
    const double y = rng.uniform(-1.5, 4.5), xx = rng.uniform(-1.5, 5.5);
    const auto v = bilinear_sample(x, y, xx);
    for (std::size_t c = 0; c < 2; ++c) ASSERT_LE(std::abs(v[c] - oracles::bilinear_reference(x, c, y, xx)), 1e-14);
  }
}

TEST(Bilinear, NonFiniteCoordinatesThrow) {
  EXPECT_THROW(bilinear_sample(Tensor({1, 2, 2}), NAN, 0.0), NumericError);
  EXPECT_THROW(bilinear_sample(Tensor({1, 2, 2}), 0.0, INFINITY), NumericError);
}

TEST(Deformable, ZeroOffsetPredictorEqualsConv) {
  SplitMix64 rng(9);
  const Tensor x = Tensor::uniform({3, 7, 6}, rng);
  DeformableParams p = make_deformable(4, 3);
  p.base = random_conv(4, 3, 3, 3, rng);
  EXPECT_TRUE(bit_identical(deformable_conv2d(x, p), conv2d(x, p.base)));
}

TEST(Deformable, UnitHorizontalOffsetShiftsSamples) {
  SplitMix64 rng(10);
  const Tensor x = Tensor::uniform({2, 6, 6}, rng);
  const Conv2dParams base = random_conv(3, 2, 3, 3, rng);
  Tensor off({18, 6, 6});
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t i = 0; i < 36; ++i) off[(2 * t + 1) * 36 + i] = 1.0;
  Tensor shifted({2, 6, 6});
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t col = 0; col + 1 < 6; ++col) shifted.at(c, r, col) = x.at(c, r, col + 1);
  // column 0 differs: its leftmost tap reads real column 0 where the shifted map has padding
  const Tensor y = deformable_conv2d_with_offsets(x, off, base), ref = conv2d(shifted, base);
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t col = 1; col < 6; ++col) EXPECT_NEAR(y.at(o, r, col), ref.at(o, r, col), 1e-12);
}

TEST(Deformable, FractionalOffsetsMatchSamplingOracle) {
  SplitMix64 rng(11);
  for (int i = 0; i < 5; ++i) {
    const Tensor x = Tensor::uniform({3, 7, 7}, rng);
    const Conv2dParams base = random_conv(2, 3, 3, 3, rng);
    const Tensor off = Tensor::uniform({18, 7, 7}, rng, -0.5, 0.5);
    EXPECT_LE(max_abs_diff(deformable_conv2d_with_offsets(x, off, base), oracles::deformable_conv_reference(x, off, base)),
              1e-12);
  }
}

TEST(Deformable, OffsetChannelMismatchThrows) {
  const Conv2dParams base = make_conv(2, 2, 3, 3);
  EXPECT_THROW(deformable_conv2d_with_offsets(Tensor({2, 5, 5}), Tensor({16, 5, 5}), base), ShapeError);
  EXPECT_THROW(deformable_conv2d_with_offsets(Tensor({2, 5, 5}), Tensor({18, 4, 5}), base), ShapeError);
  DeformableParams p = make_deformable(2, 2);
  p.offset_predictor = make_conv(9, 2, 3, 3);
  EXPECT_THROW(deformable_conv2d(Tensor({2, 5, 5}), p), ShapeError);
}

namespace {

void expect_gradients(const GraphBuilder& build, const std::vector<Tensor>& inputs) {
  for (const auto& r : check_function_gradients(build, inputs, {})) {
    EXPECT_GT(r.checked, 0u) << r.name;
    EXPECT_LE(r.max_error, 1e-5) << r.name;
  }
}

}  // namespace

TEST(ConvGradients, Conv2dInputWeightsBias) {
  SplitMix64 rng(12);
  Conv2dParams p = random_conv(2, 3, 3, 3, rng, 2);
  p.stride = 2;
  expect_gradients(
      [&](Tape& t, const std::vector<Var>& v) {
        ad::ConvVars cv = ad::bind(t, p, false);
        cv.weights = v[1];
        cv.bias = v[2];
        return ad::conv2d(v[0], cv);
      },
      {Tensor::uniform({3, 6, 5}, rng), p.weights, p.bias});
}

TEST(ConvGradients, Depthwise) {
  SplitMix64 rng(13);
  expect_gradients([](Tape&, const std::vector<Var>& v) { return ad::depthwise_conv2d(v[0], v[1], 1); },
                   {Tensor::uniform({2, 5, 5}, rng), Tensor::uniform({2, 3, 3}, rng)});
}

TEST(ConvGradients, DeformableAwayFromLattice) {
  SplitMix64 rng(14);
  const Conv2dParams p = random_conv(2, 2, 3, 3, rng);
  // offsets kept off the integer lattice so bilinear sampling is smooth there
  Tensor off = Tensor::uniform({18, 4, 4}, rng, 0.2, 0.8);
  expect_gradients(
      [&](Tape& t, const std::vector<Var>& v) {
        ad::ConvVars cv = ad::bind(t, p, false);
        cv.weights = v[2];
        return ad::deformable_conv2d_with_offsets(v[0], v[1], cv);
      },
      {Tensor::uniform({2, 4, 4}, rng), off, p.weights});
}
