#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "roaddiff/errors.hpp"
#include "roaddiff/tensor.hpp"
#include "op_cases.hpp"
#include "test_util.hpp"

using namespace roaddiff;
using rdtest::random_matrix;

TEST(Tensor, MatmulHandExample) {
  const Tensor a = Tensor::constant(Matrix(1, 2, {1, 2}));
  const Tensor b = Tensor::constant(Matrix(2, 1, {3, 4}));
  const Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_DOUBLE_EQ(c.item(), 11.0);
}

TEST(Tensor, SingletonMaskedSoftmaxIsOne) {
  Matrix mask(1, 3, 0.0);
  mask(0, 1) = 1.0;
  const Tensor s = masked_softmax_rows(Tensor::constant(Matrix(1, 3, {5.0, -2.0, 9.0})), mask);
  EXPECT_DOUBLE_EQ(s(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(s(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(s(0, 2), 0.0);
}

TEST(Tensor, EmptyMaskRowIsContractError) {
  Matrix mask(1, 2, 0.0);
  EXPECT_THROW(masked_softmax_rows(Tensor::constant(Matrix(1, 2, {1, 2})), mask), ContractError);
}

TEST(Tensor, LeakyReluNegative) {
  EXPECT_DOUBLE_EQ(leaky_relu(Tensor::scalar(-1.0), 0.2).item(), -0.2);
  EXPECT_DOUBLE_EQ(leaky_relu(Tensor::scalar(3.0), 0.2).item(), 3.0);
}

TEST(Tensor, SquareGradientAtThree) {
  Tensor x = Tensor::parameter(Matrix(1, 1, 3.0));
  Tape tape;
  tape.backward(square(x));
  ASSERT_EQ(x.grad().size(), 1u);
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Tensor, ShapeMismatchThrows) {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
  EXPECT_THROW(add_row(a, Tensor::zeros({1, 2})), ShapeError);
  EXPECT_THROW(reshape(a, {4, 2}), ShapeError);
  EXPECT_THROW(concat_cols({a, b}), ShapeError);
  EXPECT_THROW(slice_rows(a, 1, 5), ShapeError);
}

TEST(Tensor, GatherOutOfRangeIsIndexError) {
  EXPECT_THROW(gather_rows(Tensor::zeros({2, 2}), {0, 2}), IndexError);
}

TEST(Tensor, NonScalarBackwardIsContractError) {
  Tensor x = Tensor::parameter(Matrix(2, 1, 1.0));
  Tape tape;
  EXPECT_THROW(tape.backward(scale(x, 2.0)), ContractError);
}

TEST(Tensor, BackwardWithoutParametersIsContractError) {
  Tape tape;
  EXPECT_THROW(tape.backward(sum(Tensor::constant(Matrix(2, 2, 1.0)))), ContractError);
}

TEST(Tensor, ItemOnNonScalarThrows) { EXPECT_THROW(Tensor::zeros({2, 1}).item(), ContractError); }

TEST(Tensor, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::parameter(Matrix(2, 2, 1.0));
  Tape tape;
  {
    NoGradGuard g;
    const Tensor y = relu(matmul(x, x));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, TapeClearedAfterBackward) {
  Tensor x = Tensor::parameter(Matrix(2, 2, 0.5));
  Tape tape;
  const Tensor l = sum(square(x));
  EXPECT_GT(tape.size(), 0u);
  tape.backward(l);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Tensor, SigmoidStableAtExtremes) {
  const Tensor s = sigmoid(Tensor::constant(Matrix(1, 2, {-800.0, 800.0})));
  EXPECT_TRUE(std::isfinite(s(0, 0)));
  EXPECT_NEAR(s(0, 0), 0.0, 1e-300);
  EXPECT_DOUBLE_EQ(s(0, 1), 1.0);
}

TEST(Tensor, SoftmaxLargeScoresFinite) {
  Matrix mask(1, 3, 1.0);
  const Tensor s = masked_softmax_rows(Tensor::constant(Matrix(1, 3, {1000.0, 999.0, -1000.0})), mask);
  double total = 0.0;
  for (double v : s.values()) {
    EXPECT_TRUE(std::isfinite(v));
    total += v;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Tensor, ReduceAxes) {
  const Tensor a = Tensor::constant(Matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  const Tensor c = reduce_sum(a, 0), r = reduce_sum(a, 1), m = reduce_mean(a, 1);
  EXPECT_EQ(c.shape(), (Shape{1, 3}));
  EXPECT_DOUBLE_EQ(c(0, 0), 5.0);
  EXPECT_DOUBLE_EQ(c(0, 2), 9.0);
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(r(1, 0), 15.0);
  EXPECT_DOUBLE_EQ(m(0, 0), 2.0);
  EXPECT_THROW(reduce_sum(a, 2), ShapeError);
}

TEST(Tensor, DeterministicForward) {
  const auto run = [] {
    std::mt19937_64 rng(7);
    const Tensor a = Tensor::constant(random_matrix(5, 4, rng)), b = Tensor::constant(random_matrix(4, 3, rng));
    return tanh(matmul(a, b)).to_matrix().data;
  };
  EXPECT_EQ(run(), run());
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every differentiable op, 50 seeds each.

using rdtest::op_cases;

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto c = op_cases()[GetParam()];
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed * 31 + GetParam());
    ParamStore store;
    for (std::size_t k = 0; k < c.inputs.size(); ++k)
      store.add("x" + std::to_string(k), random_matrix(c.inputs[k].rows, c.inputs[k].cols, rng, c.lo, c.hi));
    std::vector<Tensor> probe_in;
    for (const auto& e : store.entries()) probe_in.push_back(e.value);
    Shape out_shape;
    {
      NoGradGuard g;
      out_shape = c.fn(probe_in).shape();
    }
    const Tensor weights = Tensor::constant(random_matrix(out_shape.rows, out_shape.cols, rng));
    const auto loss = [&] {
      std::vector<Tensor> in;
      for (const auto& e : store.entries()) in.push_back(e.value);
      return sum(mul(c.fn(in), weights));
    };
    const auto r = rdtest::check_gradients(store, loss);
    ASSERT_LE(r.max_rel, 1e-4) << c.name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range<std::size_t>(0, op_cases().size()),
                         [](const auto& info) { return op_cases()[info.param].name; });

TEST(Tensor, SoftmaxWeightedSumGradient) {
  // Gradient of a softmax-weighted sum of a random 4-vector.
  std::mt19937_64 rng(3);
  ParamStore store;
  store.add("s", random_matrix(1, 4, rng));
  const Tensor v = Tensor::constant(random_matrix(4, 1, rng));
  const Matrix mask(1, 4, 1.0);
  const auto r = rdtest::check_gradients(store, [&] { return matmul(masked_softmax_rows(store.get("s"), mask), v); });
  EXPECT_LE(r.max_rel, 1e-6);
}

TEST(Tensor, SharedInputGradientAccumulates) {
  Tensor x = Tensor::parameter(Matrix(1, 1, 2.0));
  Tape tape;
  tape.backward(add(mul(x, x), scale(x, 3.0)));  // d/dx (x^2 + 3x) = 2x + 3
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}
