// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "teq/autograd.hpp"
#include "teq/errors.hpp"
#include "teq/random.hpp"
#include "teq/tensor.hpp"
#include "test_support.hpp"

namespace teq {
namespace {

using testing::random_tensor;

constexpr float kStep = 1e-3f;
constexpr double kOpTolerance = 1e-3;

Tensor triple_loop(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += double(a[i * k + p]) * double(b[p * n + j]);
      c[i * n + j] = float(acc);
    }
  }
  return c;
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor b({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, b), b);
}

TEST(Matmul, ProjectorKeepsFirstRow) {
  const Tensor p({2, 2}, {1, 0, 0, 0});
  const Tensor b({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(p, b), Tensor({2, 2}, {5, 6, 0, 0}));
}

TEST(Matmul, MatchesTripleLoopBitwise) {
  Rng rng(11);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  EXPECT_TRUE(bitwise_equal(matmul(a, b), triple_loop(a, b)));
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), n = 1 + rng.below(16);
    const Tensor x = random_tensor({m, k}, rng, -3.0f, 3.0f);
    const Tensor y = random_tensor({k, n}, rng, -3.0f, 3.0f);
    ASSERT_TRUE(bitwise_equal(matmul(x, y), triple_loop(x, y))) << m << "x" << k << "x" << n;
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  const Tensor a({2, 3});
  const Tensor b({4, 5});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
  }
}

TEST(Elementwise, ScaleByOnesIsIdentity) {
  Rng rng(3);
  ag::Tape tape;
  const Tensor x = random_tensor({5, 6}, rng);
  ag::Var xs = ag::scale_channels(tape.leaf(x), tape.leaf(Tensor({6}, 1.0f)), 1);
  EXPECT_TRUE(bitwise_equal(xs.value(), x));
}

TEST(Elementwise, ScaleThenInverseScaleRoundTrips) {
  Rng rng(4);
  for (std::size_t axis : {0u, 1u}) {
    ag::Tape tape;
    const Tensor x = random_tensor({7, 5}, rng);
    const Tensor s = random_tensor({x.dim(axis)}, rng, 0.25f, 4.0f);
    Tensor inv(s.shape());
    for (std::size_t i = 0; i < s.numel(); ++i) inv[i] = 1.0f / s[i];
    ag::Var back = ag::scale_channels(ag::scale_channels(tape.leaf(x), tape.leaf(s), axis), tape.leaf(inv), axis);
    EXPECT_LE(max_relative_diff(back.value(), x, 1e-30), 1e-6);
  }
}

TEST(Elementwise, DivideExample) {
  ag::Tape tape;
  ag::Var q = ag::div(tape.leaf(Tensor({3}, {2, 4, 6})), tape.leaf(Tensor({3}, {2, 2, 2})));
  EXPECT_EQ(q.value(), Tensor({3}, {1, 2, 3}));
}

TEST(Elementwise, DivideByZeroIsDomainError) {
  ag::Tape tape;
  EXPECT_THROW(ag::div(tape.leaf(Tensor({2}, {1, 2})), tape.leaf(Tensor({2}, {1, 0}))), NumericDomainError);
}

TEST(Elementwise, IncompatibleBroadcastIsDimensionError) {
  ag::Tape tape;
  EXPECT_THROW(ag::scale_channels(tape.leaf(Tensor({3, 4})), tape.leaf(Tensor({3})), 1), DimensionError);
  EXPECT_THROW(ag::add(tape.leaf(Tensor({3, 4})), tape.leaf(Tensor({4, 3}))), DimensionError);
}

TEST(LayerNorm, ConstantRowMapsToZeros) {
  ag::Tape tape;
  ag::Var y = ag::layer_norm(tape.leaf(Tensor({1, 4}, 3.5f)), tape.leaf(Tensor({4}, 1.0f)),
                             tape.leaf(Tensor({4}, 0.0f)), 1e-5f);
  for (float v : y.value().data()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, HandComputedPair) {
  ag::Tape tape;
  ag::Var x = tape.leaf(Tensor({1, 2}, {1, 3}));
  ag::Var g = tape.leaf(Tensor({2}, 1.0f));
  ag::Var y = ag::layer_norm(x, g, tape.leaf(Tensor({2}, 0.0f)), 0.0f);
  EXPECT_FLOAT_EQ(y.value()[0], -1.0f);
  EXPECT_FLOAT_EQ(y.value()[1], 1.0f);
  ag::Var shifted = ag::layer_norm(x, g, tape.leaf(Tensor({2}, 5.0f)), 0.0f);
  EXPECT_FLOAT_EQ(shifted.value()[0], 4.0f);
  EXPECT_FLOAT_EQ(shifted.value()[1], 6.0f);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  ag::Tape tape;
  const std::vector<std::int32_t> targets = {0, 3};
  ag::Var loss = ag::softmax_cross_entropy(tape.leaf(Tensor({2, 4}, 0.25f)), targets);
  EXPECT_NEAR(loss.value().item(), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, SaturatedLogitIsNearZero) {
  ag::Tape tape;
  Tensor logits({1, 5}, 0.0f);
  logits[2] = 1000.0f;
  const std::vector<std::int32_t> targets = {2};
  EXPECT_NEAR(ag::softmax_cross_entropy(tape.leaf(logits), targets).value().item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesScalarFormula) {
  Rng rng(8);
  const Tensor logits = random_tensor({5, 7}, rng, -4.0f, 4.0f);
  const std::vector<std::int32_t> targets = {0, 6, 3, 3, 1};
  double expected = 0.0;
  for (std::size_t r = 0; r < 5; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 7; ++c) z += std::exp(double(logits.at(r, c)));
    expected += std::log(z) - double(logits.at(r, std::size_t(targets[r])));
  }
  expected /= 5.0;
  ag::Tape tape;
  EXPECT_NEAR(ag::softmax_cross_entropy(tape.leaf(logits), targets).value().item(), expected, 1e-6);
}

TEST(CrossEntropy, OutOfRangeTargetIsIndexError) {
  ag::Tape tape;
  const std::vector<std::int32_t> targets = {4};
  EXPECT_THROW(ag::softmax_cross_entropy(tape.leaf(Tensor({1, 4})), targets), IndexError);
}

TEST(Backward, NonScalarLossIsContractError) {
  ag::Tape tape;
  ag::Var x = tape.leaf(Tensor({3}, 1.0f), true);
  EXPECT_THROW(tape.backward(ag::mul(x, x)), ContractError);
}

TEST(FiniteDiff, SumOfSquares) {
  Rng rng(1);
  const auto r = ag::finite_diff_check([](ag::Tape&, ag::Var x) { return ag::sum(ag::mul(x, x)); },
                                       random_tensor({4, 5}, rng), kStep);
  EXPECT_LE(r.max_rel_error, 1e-3);
}

TEST(FiniteDiff, ConstantFunctionHasZeroError) {
  const auto r = ag::finite_diff_check(
      [](ag::Tape& tape, ag::Var) { return tape.leaf(Tensor::scalar(2.5f)); }, Tensor({3}, 0.5f), kStep);
  EXPECT_EQ(r.max_rel_error, 0.0);
  for (float g : r.analytic.data()) EXPECT_EQ(g, 0.0f);
  for (float g : r.numeric.data()) EXPECT_EQ(g, 0.0f);
}

// Each op is checked through a centered random projection of its output,
// so every output coordinate contributes to the scalar.
class OpGradient : public ::testing::Test {
 protected:
  using Op = testing::UnaryOp;

  double check(const Op& op, const Tensor& x) {
    return ag::finite_diff_check(testing::centered_probe(op, x, rng_), x, kStep).max_rel_error;
  }

  Tensor rand(const Shape& shape, float lo = -1.0f, float hi = 1.0f) { return random_tensor(shape, rng_, lo, hi); }

  Rng rng_{2024};
};

TEST_F(OpGradient, Matmul) {
  const Tensor a = rand({3, 4});
  const Tensor b = rand({4, 5});
  EXPECT_LE(check([&](ag::Tape& t, ag::Var x) { return ag::matmul(x, t.leaf(b)); }, a), kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var x) { return ag::matmul(t.leaf(a), x); }, b), kOpTolerance);
}

TEST_F(OpGradient, AddMulDiv) {
  const Tensor a = rand({3, 4});
  const Tensor b = rand({3, 4});
  const Tensor d = rand({3, 4}, 0.5f, 1.0f);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var x) { return ag::add(x, t.leaf(b)); }, a), kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var x) { return ag::mul(x, t.leaf(b)); }, a), kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var x) { return ag::div(x, t.leaf(d)); }, a), kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var x) { return ag::div(t.leaf(a), x); }, d), kOpTolerance);
}

TEST_F(OpGradient, ChannelScaling) {
  const Tensor x = rand({4, 6});
  for (std::size_t axis : {0u, 1u}) {
    const Tensor s = rand({x.dim(axis)}, 0.5f, 1.5f);
    EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::scale_channels(in, t.leaf(s), axis); }, x),
              kOpTolerance);
    EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::scale_channels(t.leaf(x), in, axis); }, s),
              kOpTolerance);
    EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::unscale_channels(in, t.leaf(s), axis); }, x),
              kOpTolerance);
    EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::unscale_channels(t.leaf(x), in, axis); }, s),
              kOpTolerance);
  }
}

TEST_F(OpGradient, AddConstant) {
  const Tensor offset = rand({3, 3});
  EXPECT_LE(check([&](ag::Tape&, ag::Var in) { return ag::add_constant(in, offset); }, rand({3, 3})),
            kOpTolerance);
}

TEST_F(OpGradient, LayerNormAllInputs) {
  const Tensor x = rand({3, 8});
  const Tensor g = rand({8}, 0.5f, 1.5f);
  const Tensor b = rand({8});
  const float eps = 1e-5f;
  EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::layer_norm(in, t.leaf(g), t.leaf(b), eps); }, x),
            kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::layer_norm(t.leaf(x), in, t.leaf(b), eps); }, g),
            kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return ag::layer_norm(t.leaf(x), t.leaf(g), in, eps); }, b),
            kOpTolerance);
}

TEST_F(OpGradient, Gelu) {
  EXPECT_LE(check([](ag::Tape&, ag::Var in) { return ag::gelu(in); }, rand({4, 5})), kOpTolerance);
}

TEST_F(OpGradient, EmbeddingTable) {
  const std::vector<std::int32_t> ids = {2, 0, 2, 4};
  EXPECT_LE(check([&](ag::Tape&, ag::Var in) { return ag::embedding(in, ids); }, rand({5, 3})), kOpTolerance);
}

TEST_F(OpGradient, CausalAttentionEachInput) {
  const std::size_t batch = 2, seq = 3, heads = 2, d = 4;
  const Tensor q = rand({batch * seq, d});
  const Tensor k = rand({batch * seq, d});
  const Tensor v = rand({batch * seq, d});
  auto attn = [&](ag::Var a, ag::Var b, ag::Var c) { return ag::causal_attention(a, b, c, batch, seq, heads); };
  EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return attn(in, t.leaf(k), t.leaf(v)); }, q), kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return attn(t.leaf(q), in, t.leaf(v)); }, k), kOpTolerance);
  EXPECT_LE(check([&](ag::Tape& t, ag::Var in) { return attn(t.leaf(q), t.leaf(k), in); }, v), kOpTolerance);
}

TEST_F(OpGradient, CrossEntropyAndSum) {
  const std::vector<std::int32_t> targets = {1, 0, 5};
  const auto ce = ag::finite_diff_check(
      [&](ag::Tape&, ag::Var in) { return ag::softmax_cross_entropy(in, targets); }, rand({3, 6}), kStep);
  EXPECT_LE(ce.max_rel_error, kOpTolerance);
  const auto s = ag::finite_diff_check([](ag::Tape&, ag::Var in) { return ag::sum(in); }, rand({2, 3}), kStep);
  EXPECT_LE(s.max_rel_error, kOpTolerance);
}

TEST(Backward, RepeatedRunsGiveBitwiseIdenticalGradients) {
  Rng rng(5);
  const Tensor x = random_tensor({4, 6}, rng);
  const Tensor w = random_tensor({6, 3}, rng);
  const std::vector<std::int32_t> targets = {0, 1, 2, 1};
  auto run = [&] {
    ag::Tape tape;
    ag::Var xv = tape.leaf(x, true);
    ag::Var wv = tape.leaf(w, true);
    tape.backward(ag::softmax_cross_entropy(ag::gelu(ag::matmul(xv, wv)), targets));
    return std::pair{tape.grad_or_zeros(xv), tape.grad_or_zeros(wv)};
  };
  const auto first = run();
  const auto second = run();
  EXPECT_TRUE(bitwise_equal(first.first, second.first));
  EXPECT_TRUE(bitwise_equal(first.second, second.second));
}

TEST(Backward, SharedInputAccumulatesLikeDuplicatedLeaves) {
  Rng rng(6);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor a = random_tensor({4, 2}, rng);
  const Tensor b = random_tensor({3, 4}, rng);

  ag::Tape shared;
  ag::Var xs = shared.leaf(x, true);
  shared.backward(ag::add(ag::sum(ag::matmul(xs, shared.leaf(a))), ag::sum(ag::mul(xs, shared.leaf(b)))));

  ag::Tape split;
  ag::Var x1 = split.leaf(x, true);
  ag::Var x2 = split.leaf(x, true);
  split.backward(ag::add(ag::sum(ag::matmul(x1, split.leaf(a))), ag::sum(ag::mul(x2, split.leaf(b)))));

  const Tensor g1 = split.grad_or_zeros(x1);
  const Tensor g2 = split.grad_or_zeros(x2);
  Tensor expected(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) expected[i] = g1[i] + g2[i];
  EXPECT_TRUE(bitwise_equal(shared.grad_or_zeros(xs), expected));
}

TEST(Backward, LeavesWithoutGradFlagGetNothing) {
  ag::Tape tape;
  ag::Var frozen = tape.leaf(Tensor({2}, 1.0f), false);
  ag::Var live = tape.leaf(Tensor({2}, 2.0f), true);
  tape.backward(ag::sum(ag::mul(frozen, live)));
  EXPECT_EQ(tape.grad(frozen), nullptr);
  ASSERT_NE(tape.grad(live), nullptr);
  EXPECT_EQ(*tape.grad(live), Tensor({2}, 1.0f));
}

}  // namespace
}  // namespace teq
