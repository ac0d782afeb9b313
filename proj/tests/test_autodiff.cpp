#include <cmath>

#include <gtest/gtest.h>

#include "mpatch/autodiff.hpp"
#include "mpatch/rng.hpp"
#include "grad_cases.hpp"

using namespace mpatch;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(scale * rng.normal());
  return t;
}

Tensor targets_for(std::size_t rows, std::size_t classes, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor t({rows, 1});
  for (std::size_t i = 0; i < rows; ++i) t[i] = static_cast<float>(rng.below(classes));
  return t;
}

}  // namespace

TEST(Forward, SoftmaxOfZerosIsUniform) {
  Graph g;
  Var x = g.constant("x", Tensor({1, 3}, 0.0f));
  Var s = g.softmax(x);
  g.forward();
  const Tensor out = g.value(s);
  double sum = 0;
  for (float v : out.vec()) {
    EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
    sum += v;
  }
  EXPECT_NEAR(sum, 1.0, 1e-6);
}

TEST(Forward, L2NormalizeThreeFour) {
  Graph g;
  Var x = g.constant("x", Tensor({1, 2}, {3.0f, 4.0f}));
  Var n = g.l2_normalize(x);
  g.forward();
  EXPECT_FLOAT_EQ(g.value(n)[0], 0.6f);
  EXPECT_FLOAT_EQ(g.value(n)[1], 0.8f);
}

TEST(Forward, MseOfIdenticalInputsIsZero) {
  Graph g;
  const Tensor a = random_tensor({5, 7}, 3);
  Var x = g.constant("a", a);
  Var y = g.constant("b", a);
  Var l = g.mse_loss(x, y);
  g.forward();
  EXPECT_EQ(g.scalar(l), 0.0f);
}

TEST(Forward, ShapeErrorNamesTheNode) {
  Graph g;
  Var a = g.constant("a", Tensor({2, 3}, 1.0f));
  Var b = g.constant("b", Tensor({4, 5}, 1.0f));
  try {
    g.matmul(a, b);
    FAIL() << "expected a shape error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ShapeMismatch);
    EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos) << e.what();
  }
}

TEST(Forward, UnboundInputFails) {
  Graph g;
  Var x = g.input("x", {2, 2});
  g.tanh(x);
  EXPECT_THROW(g.forward(), Error);
}

TEST(Forward, RepeatedEvaluationIsDeterministic) {
  Graph g;
  Var w = g.parameter("w", random_tensor({4, 4}, 1), true);
  Var x = g.constant("x", random_tensor({3, 4}, 2));
  Var y = g.gelu(g.matmul(x, w));
  g.forward();
  const Tensor first = g.value(y);
  g.forward();
  EXPECT_TRUE(bit_equal(first, g.value(y)));
}

TEST(Backward, SoftmaxCrossEntropyGradientIsSoftmaxMinusOneHot) {
  Graph g;
  const Tensor logits = random_tensor({3, 4}, 11);
  const Tensor target = targets_for(3, 4, 12);
  Var z = g.parameter("z", logits, true);
  Var t = g.constant("t", target);
  Var loss = g.softmax_cross_entropy(z, t);
  Var p = g.softmax(z);
  g.forward();
  const Tensor grad = g.backward(loss).at("z");
  const Tensor probs = g.value(p);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double onehot = c == static_cast<std::size_t>(target[i]) ? 1.0 : 0.0;
      // mean over rows scales each row's gradient by 1/3
      EXPECT_NEAR(grad.at(i, c), (probs.at(i, c) - onehot) / 3.0, 1e-6);
    }
  }
}

TEST(Backward, TanhSlopeAtZeroIsOne) {
  Graph g;
  Var x = g.parameter("x", Tensor({1, 1}, 0.0f), true);
  Var y = g.tanh(x);
  Var loss = g.mse_loss(y, g.constant("zero", Tensor({1, 1}, -0.5f)));
  g.forward();
  // d/dx (tanh x + 0.5)^2 = 2 (tanh x + 0.5) tanh'(x) = 1 at x = 0
  EXPECT_NEAR(g.backward(loss).at("x")[0], 1.0, 1e-6);
}

TEST(Backward, MseGradient) {
  Graph g;
  const Tensor a = random_tensor({2, 3}, 5), b = random_tensor({2, 3}, 6);
  Var va = g.parameter("a", a, true);
  Var loss = g.mse_loss(va, g.constant("b", b));
  g.forward();
  const Tensor grad = g.backward(loss).at("a");
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(grad[i], 2.0 * (a[i] - b[i]) / 6.0, 1e-6);
  }
}

TEST(Backward, FrozenLeavesReceiveNoGradient) {
  Graph g;
  Var w = g.parameter("w", random_tensor({3, 3}, 1), true);
  Var f = g.parameter("frozen", random_tensor({3, 3}, 2), false);
  Var x = g.constant("x", random_tensor({2, 3}, 3));
  Var y = g.matmul(g.matmul(x, w), f);
  Var loss = g.mse_loss(y, g.constant("t", Tensor({2, 3}, 0.0f)));
  g.forward();
  const auto grads = g.backward(loss);
  EXPECT_EQ(grads.count("w"), 1u);
  EXPECT_EQ(grads.count("frozen"), 0u);
}

TEST(Backward, NonScalarLossFails) {
  Graph g;
  Var w = g.parameter("w", random_tensor({2, 2}, 1), true);
  Var y = g.tanh(w);
  g.forward();
  EXPECT_THROW(g.backward(y), Error);
}

TEST(GradCheck, ConstantGraphHasZeroError) {
  Graph g;
  g.parameter("w", random_tensor({2, 2}, 1), true);
  Var x = g.constant("x", random_tensor({2, 2}, 2));
  Var loss = g.mse_loss(x, g.constant("y", Tensor({2, 2}, 0.0f)));
  g.forward();
  EXPECT_EQ(g.backward(loss).at("w"), Tensor({2, 2}, 0.0f));
  EXPECT_EQ(grad_check(g, loss, "w", 1e-3), 0.0);
}

TEST(GradCheck, RejectsBadEpsilonAndFrozenLeaf) {
  Graph g;
  Var w = g.parameter("w", random_tensor({2, 2}, 1), true);
  g.parameter("f", random_tensor({2, 2}, 2), false);
  Var loss = g.mse_loss(g.tanh(w), g.constant("y", Tensor({2, 2}, 0.0f)));
  g.forward();
  EXPECT_THROW(grad_check(g, loss, "w", 0.0), Error);
  EXPECT_THROW(grad_check(g, loss, "f", 1e-3), Error);
}

// Each primitive and each training objective, checked on many seeds.
class PrimitiveGrad : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveGrad, EveryPrimitiveMatchesFiniteDifferences) {
  for (const auto& c : gradcases::primitive_cases(GetParam())) {
    EXPECT_LT(gradcases::max_error(c), 1e-3) << c.name;
  }
}

TEST_P(PrimitiveGrad, TrainingObjectivesMatchFiniteDifferences) {
  for (const auto& c : gradcases::composed_cases(GetParam())) {
    EXPECT_LT(gradcases::max_error(c), 1e-3) << c.name;
  }
}

TEST_P(PrimitiveGrad, FrozenHeadCrossEntropy) {
  const std::uint64_t s = GetParam();
  Graph g;
  Var x = g.constant("x", random_tensor({5, 6}, s));
  Var w = g.parameter("w", random_tensor({6, 4}, s + 1, 0.5), true);
  Var head = g.parameter("head", random_tensor({4, 3}, s + 2), false);
  Var logits = g.scale(g.matmul(g.l2_normalize(g.matmul(x, w)), head), 3.0);
  Var loss = g.softmax_cross_entropy(logits, g.constant("t", targets_for(5, 3, s)));
  g.forward();
  EXPECT_LT(grad_check(g, loss, "w", 1e-3), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGrad, ::testing::Range<std::uint64_t>(0, 20));
