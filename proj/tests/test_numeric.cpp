#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "circuitedit/autodiff.hpp"
#include "circuitedit/errors.hpp"
#include "circuitedit/tensor.hpp"
#include "gradient_cases.hpp"

using namespace circuitedit;

namespace {

using gradcases::contract;
using gradcases::random_tensor;

}  // namespace

TEST(Tensor, MatmulIdentity) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  EXPECT_TRUE(kernels::matmul(a, Tensor::identity(2)).bit_equal(a));
}

TEST(Tensor, SoftmaxSymmetric) {
  const Tensor s = kernels::softmax_rows(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Tensor, LayerNormMatchesScalarLoop) {
  const Tensor x({1, 2}, {2.0, 4.0});
  const Tensor y = kernels::layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}));
  // scalar loop: mean 3, biased variance 1
  double mean = 0.0, var = 0.0;
  for (double v : x.storage()) mean += v / 2.0;
  for (double v : x.storage()) var += (v - mean) * (v - mean) / 2.0;
  const double rstd = 1.0 / std::sqrt(var + 1e-5);
  EXPECT_NEAR(y[0], (2.0 - mean) * rstd, 1e-15);
  EXPECT_NEAR(y[1], (4.0 - mean) * rstd, 1e-15);
  EXPECT_NEAR(y[0], -1.0, 1e-5);
  EXPECT_NEAR(y[1], 1.0, 1e-5);
}

TEST(Tensor, ShapeErrorsNameBothShapes) {
  try {
    kernels::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos) << msg;
  }
  EXPECT_THROW(Tensor({2, 2}, {1.0}), ShapeError);
  EXPECT_THROW(Tensor(Shape{0}), ShapeError);
}

TEST(Autodiff, SumGradientIsOnes) {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 3}, {0.3, -1.0, 2.0}));
  Var loss = ops::sum(x);
  tape.backward(loss);
  const Tensor g = tape.grad(x);
  for (double v : g.storage()) EXPECT_EQ(v, 1.0);
}

TEST(Autodiff, DotProductGradients) {
  Tape tape;
  const Tensor xv({1, 3}, {1.0, 2.0, 3.0}), yv({1, 3}, {-4.0, 0.5, 7.0});
  Var x = tape.leaf(xv), y = tape.leaf(yv);
  tape.backward(ops::sum(ops::mul(x, y)));
  EXPECT_TRUE(tape.grad(x).bit_equal(yv));
  EXPECT_TRUE(tape.grad(y).bit_equal(xv));
}

TEST(Autodiff, UnusedValueHasZeroGradient) {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1.0, 2.0}));
  Var unused = tape.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
  tape.backward(ops::sum(x));
  const Tensor g = tape.grad(unused);
  EXPECT_EQ(g.shape(), (Shape{2, 2}));
  for (double v : g.storage()) EXPECT_EQ(v, 0.0);
}

TEST(Autodiff, BackwardTwiceFails) {
  Tape tape;
  Var loss = ops::sum(tape.leaf(Tensor({2}, {1.0, 2.0})));
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), TapeError);
}

TEST(Autodiff, NonScalarLossFails) {
  Tape tape;
  Var x = tape.leaf(Tensor({1, 2}, {1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), TapeError);
}

TEST(Autodiff, NestedTapesForbidden) {
  Tape outer;
  EXPECT_THROW(Tape inner, TapeError);
}

TEST(Autodiff, HandleFromAnotherPassIsRejected) {
  Var stale;
  {
    Tape first;
    stale = first.leaf(Tensor({2}, {1.0, 2.0}));
  }
  Tape second;
  Var fresh = second.leaf(Tensor({2}, {1.0, 2.0}));
  (void)fresh;
  stale.tape = &second;  // same address is likely; the id still differs
  EXPECT_THROW(ops::scale(stale, 2.0), TapeError);
}

TEST(Autodiff, MulShapeMismatchNamesShapes) {
  Tape tape;
  Var a = tape.leaf(Tensor::zeros({2, 3}));
  Var b = tape.leaf(Tensor::zeros({3, 2}));
  try {
    ops::mul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 3]"), std::string::npos);
    EXPECT_NE(msg.find("[3, 2]"), std::string::npos);
  }
}

TEST(FiniteDifference, Square) {
  const double err = finite_difference_check([](Var x) { return ops::mul(x, x); }, Tensor({1}, {3.0}));
  EXPECT_LT(err, 1e-8);
}

TEST(FiniteDifference, ConstantFunctionHasZeroError) {
  const double err = finite_difference_check(
      [](Var x) { return x.tape->constant(Tensor::scalar(4.0)); }, Tensor({1, 3}, {1.0, 2.0, 3.0}));
  EXPECT_EQ(err, 0.0);
}

TEST(FiniteDifference, SoftmaxCrossEntropyAgainstClosedForm) {
  std::mt19937_64 rng(11);
  const Tensor logits = random_tensor(rng, {1, 6});
  const std::vector<int> target{4};
  const double err =
      finite_difference_check([&](Var x) { return ops::cross_entropy(x, target); }, logits);
  EXPECT_LT(err, 1e-6);

  // closed form: softmax - onehot
  Tape tape;
  Var x = tape.leaf(logits);
  tape.backward(ops::cross_entropy(x, target));
  const Tensor p = kernels::softmax_rows(logits);
  const Tensor g = tape.grad(x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(g[i], p[i] - (i == 4 ? 1.0 : 0.0), 1e-15);
}

TEST(FiniteDifference, NonFiniteOutputFails) {
  EXPECT_THROW(finite_difference_check([](Var x) { return ops::scale(x, 1e308 * 10); }, Tensor({1}, {1.0})),
               NumericError);
}

// 100 random cases per primitive, each gradient against central differences.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const int which = GetParam();
  std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(which));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const gradcases::Case tc = gradcases::primitive_case(which, rng);
    worst = std::max(worst, finite_difference_check(tc.f, tc.point));
  }
  EXPECT_LT(worst, 1e-5) << "primitive " << which;
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range(0, gradcases::kPrimitiveCount));

TEST(Autodiff, BackwardIsLinearInTheLoss) {
  std::mt19937_64 rng(5);
  const Tensor xv = random_tensor(rng, {3, 4});
  const Tensor wv = random_tensor(rng, {4, 4});
  const std::vector<int> t1{0, 1, 2};
  auto grad_of = [&](bool first, bool second) {
    Tape tape;
    Var x = tape.leaf(xv);
    Var h = ops::gelu(ops::matmul(x, tape.constant(wv)));
    Var loss = tape.constant(Tensor({1, 1}, {0.0}));
    if (first) loss = ops::add(loss, ops::sum(ops::cross_entropy(h, t1)));
    if (second) loss = ops::add(loss, ops::sum(ops::mul(h, h)));
    tape.backward(loss);
    return tape.grad(x);
  };
  const Tensor both = grad_of(true, true);
  const Tensor sum = kernels::add(grad_of(true, false), grad_of(false, true));
  EXPECT_LE(max_abs_diff(both, sum), 1e-12);
}

TEST(Autodiff, ReplayIsBitIdentical) {
  std::mt19937_64 rng(9);
  const Tensor xv = random_tensor(rng, {4, 6});
  const Tensor gain = random_tensor(rng, {6}), bias = random_tensor(rng, {6});
  auto run = [&] {
    Tape tape;
    Var x = tape.leaf(xv);
    Var y = ops::softmax(ops::layer_norm(x, tape.constant(gain), tape.constant(bias)));
    tape.backward(ops::cross_entropy(y, std::vector<int>{0, 1, 2, 3}));
    return std::pair{y.value(), tape.grad(x)};
  };
  const auto a = run(), b = run();
  EXPECT_TRUE(a.first.bit_equal(b.first));
  EXPECT_TRUE(a.second.bit_equal(b.second));
}

TEST(Autodiff, TwoLayerMlpParameterGradients) {
  std::mt19937_64 rng(21);
  const Tensor x = random_tensor(rng, {5, 4});
  const Tensor w1 = random_tensor(rng, {4, 7}, 0.5), w2 = random_tensor(rng, {7, 3}, 0.5);
  const std::vector<int> targets{0, 2, 1, 1, 0};
  EXPECT_LT(finite_difference_check(
                [&](Var w) {
                  Tape& t = *w.tape;
                  return ops::cross_entropy(ops::matmul(ops::gelu(ops::matmul(t.constant(x), w)), t.constant(w2)),
                                            targets);
                },
                w1),
            1e-6);
  EXPECT_LT(finite_difference_check(
                [&](Var w) {
                  Tape& t = *w.tape;
                  return ops::cross_entropy(ops::matmul(ops::gelu(ops::matmul(t.constant(x), t.constant(w1))), w),
                                            targets);
                },
                w2),
            1e-6);
}
