#include <gtest/gtest.h>

#include "cafbifpn/autodiff.hpp"
#include "cafbifpn/gradcheck.hpp"

using namespace cafbifpn;

TEST(Backward, ProductRule) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(2.0)), y = t.leaf(Tensor::scalar(3.0));
  const Gradients g = t.backward(ad::mul(x, y), Tensor::scalar(1.0));
  EXPECT_EQ(g.of(x)[0], 3.0);
  EXPECT_EQ(g.of(y)[0], 2.0);
}

TEST(Backward, SumOfMatmulGivesRowSumsOfRightOperand) {
  SplitMix64 rng(1);
  const Tensor A = Tensor::uniform({3, 4}, rng), B = Tensor::uniform({4, 5}, rng);
  Tape t;
  Var a = t.leaf(A), b = t.leaf(B);
  const Tensor g = t.backward(ad::sum(ad::matmul(a, b)), Tensor::scalar(1.0)).of(a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double row = 0.0;
      for (std::size_t j = 0; j < 5; ++j) row += B.at(k, j);
      EXPECT_NEAR(g.at(i, k), row, 1e-14);
    }
}

TEST(Backward, SoftmaxSumHasZeroGradient) {
  SplitMix64 rng(2);
  Tape t;
  Var x = t.leaf(Tensor::uniform({6}, rng, -3, 3));
  const Tensor g = t.backward(ad::sum(ad::softmax_lastdim(x)), Tensor::scalar(1.0)).of(x);
  EXPECT_LE(max_abs(g), 1e-12);
}

TEST(Backward, FanOutAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(1.5));
  Var y = ad::add(ad::mul(x, x), ad::scale(x, 4.0));
  EXPECT_DOUBLE_EQ(t.backward(y, Tensor::scalar(1.0)).of(x)[0], 2 * 1.5 + 4.0);
}

TEST(Backward, SeedWeightsTheOutput) {
  Tape t;
  Var x = t.leaf(Tensor({2}, std::vector<double>{1, 2}));
  const Tensor g = t.backward(ad::scale(x, 3.0), Tensor({2}, std::vector<double>{10, -1})).of(x);
  EXPECT_EQ(g, Tensor({2}, std::vector<double>{30, -3}));
}

TEST(Backward, SeedShapeMustMatch) {
  Tape t;
  Var x = t.leaf(Tensor({2, 2}));
  EXPECT_THROW(t.backward(x, Tensor::scalar(1.0)), ShapeError);
}

TEST(Backward, UnreachableLeafGetsZeros) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(1.0)), unused = t.leaf(Tensor({2, 3}));
  const Gradients g = t.backward(ad::scale(x, 2.0), Tensor::scalar(1.0));
  EXPECT_FALSE(g.has(unused));
  EXPECT_EQ(g.of(unused), Tensor::zeros({2, 3}));
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape t;
  Var c = t.constant(Tensor::scalar(2.0)), x = t.leaf(Tensor::scalar(5.0));
  const Gradients g = t.backward(ad::mul(c, x), Tensor::scalar(1.0));
  EXPECT_FALSE(g.has(c));
  EXPECT_EQ(g.of(x)[0], 2.0);
}

TEST(Tape, ForeignOrDetachedNodeRaisesGraphError) {
  Tape a, b;
  Var x = a.leaf(Tensor::scalar(1.0));
  Var y = b.leaf(Tensor::scalar(1.0));
  EXPECT_THROW(ad::add(x, y), GraphError);
  EXPECT_THROW(b.backward(x, Tensor::scalar(1.0)), GraphError);
  EXPECT_THROW(a.value(Var{&a, 99}), GraphError);
  EXPECT_THROW(a.value(Var{}), GraphError);
}

TEST(Tape, ReluRecordsMarginAndBranches) {
  Tape t;
  Var x = t.leaf(Tensor({3}, std::vector<double>{-0.5, 0.01, 2.0}));
  const auto before = t.diagnostics().branch_signature;
  ad::relu(x);
  EXPECT_NE(t.diagnostics().branch_signature, before);
  EXPECT_DOUBLE_EQ(t.diagnostics().min_relu_margin, 0.01);
}

class OpGradient : public ::testing::Test {
 protected:
  static void expect_smooth(const GraphBuilder& build, const std::vector<Tensor>& inputs) {
    for (const auto& r : check_function_gradients(build, inputs, {})) {
      EXPECT_GT(r.checked, 0u) << r.name;
      EXPECT_LE(r.max_error, 1e-5) << r.name;
    }
  }
  SplitMix64 rng{77};
};

TEST_F(OpGradient, AddSubMulScale) {
  expect_smooth([](Tape&, const std::vector<Var>& v) { return ad::scale(ad::mul(ad::add(v[0], v[1]), ad::sub(v[0], v[1])), 1.7); },
                {Tensor::uniform({3, 4}, rng), Tensor::uniform({3, 4}, rng)});
}

TEST_F(OpGradient, Relu) {
  expect_smooth([](Tape&, const std::vector<Var>& v) { return ad::relu(v[0]); }, {Tensor::uniform({20}, rng)});
}

TEST_F(OpGradient, MatmulAndBatchedMatmul) {
  expect_smooth([](Tape&, const std::vector<Var>& v) { return ad::matmul(v[0], v[1]); },
                {Tensor::uniform({3, 4}, rng), Tensor::uniform({4, 2}, rng)});
  expect_smooth([](Tape&, const std::vector<Var>& v) { return ad::batched_matmul(v[0], v[1], true); },
                {Tensor::uniform({2, 3, 4}, rng), Tensor::uniform({2, 5, 4}, rng)});
  expect_smooth([](Tape&, const std::vector<Var>& v) { return ad::batched_matmul(v[0], v[1], false); },
                {Tensor::uniform({2, 3, 4}, rng), Tensor::uniform({2, 4, 5}, rng)});
}

TEST_F(OpGradient, SoftmaxWeightedByConstant) {
  const Tensor w = Tensor::uniform({3, 5}, rng);
  expect_smooth([&](Tape& t, const std::vector<Var>& v) { return ad::mul(ad::softmax_lastdim(v[0]), t.constant(w)); },
                {Tensor::uniform({3, 5}, rng, -2, 2)});
}

TEST_F(OpGradient, StructuralOps) {
  const Tensor w = Tensor::uniform({4, 3, 2}, rng);
  expect_smooth(
      [&](Tape& t, const std::vector<Var>& v) {
        Var c = ad::concat_axis({v[0], v[1]}, 1);                  // [2,12]
        Var p = ad::permute(ad::reshape(c, {2, 3, 4}), {2, 1, 0});  // [4,3,2]
        Var s = ad::slice(ad::mul(p, t.constant(w)), 0, 1, 2);      // [2,3,2]
        return ad::reduce_mean_axis(s, 1);
      },
      {Tensor::uniform({2, 5}, rng), Tensor::uniform({2, 7}, rng)});
}

TEST(Evaluate, ValueHelperMatchesTape) {
  const Tensor out = evaluate([](Tape& t) { return ad::scale(t.constant(Tensor::scalar(2.0)), 3.0); });
  EXPECT_EQ(out[0], 6.0);
}
