/*
 * Copyright 2026 The npdraw Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "npdraw/adam.hpp"
#include "npdraw/gumbel.hpp"
#include "npdraw/op_registry.hpp"
#include "op_suite.hpp"

namespace ad = npdraw::ad;
using ad::TensorD;
using ad::TensorF;
using npdraw::testing::gradcheck;
using npdraw::testing::random_tensor;

TEST(Tensor, FromRejectsWrongLength) {
  EXPECT_THROW(TensorF::from({2, 3}, {1, 2, 3}), npdraw::ShapeError);
}

TEST(Ops, ConvOutputExtent) {
  std::mt19937_64 rng(1);
  TensorF x = TensorF::zeros({1, 1, 28, 28});
  TensorF w = ad::uniform_tensor<float>({8, 1, 3, 3}, 0.1, rng);
  TensorF y = ad::conv2d(x, w, TensorF(), 2, 1);
  EXPECT_EQ(y.shape(), (ad::Shape{1, 8, 14, 14}));
}

TEST(Ops, ReluValues) {
  TensorF y = ad::relu(TensorF::from({2}, {-1.5f, 2.0f}));
  EXPECT_EQ(y.at(0), 0.0f);
  EXPECT_EQ(y.at(1), 2.0f);
}

TEST(Ops, SoftmaxOfZerosIsUniform) {
  TensorD y = ad::softmax(TensorD::zeros({3}));
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12);
}

TEST(Ops, BinaryShapeErrorNamesOpAndShapes) {
  try {
    ad::add(TensorF::zeros({2, 3}), TensorF::zeros({4}));
    FAIL();
  } catch (const npdraw::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
}

TEST(Ops, MatmulShapeError) {
  EXPECT_THROW(ad::matmul(TensorF::zeros({2, 3}), TensorF::zeros({4, 2})), npdraw::ShapeError);
}

TEST(Backward, LinearMapGradIsInput) {
  TensorD w = TensorD::from({3}, {0.5, -1, 2}).set_requires_grad(true);
  TensorD x = TensorD::from({3}, {3, 4, 5});
  ad::backward(ad::sum(ad::mul(w, x)));
  EXPECT_EQ(std::vector<double>(w.grad().begin(), w.grad().end()), (std::vector<double>{3, 4, 5}));
}

TEST(Backward, ReluSubgradient) {
  TensorD w = TensorD::from({2}, {-1, 2}).set_requires_grad(true);
  ad::backward(ad::sum(ad::relu(w)));
  EXPECT_EQ(w.grad()[0], 0.0);
  EXPECT_EQ(w.grad()[1], 1.0);
  TensorD z = TensorD::from({1}, {0.0}).set_requires_grad(true);
  ad::backward(ad::sum(ad::relu(z)));
  EXPECT_EQ(z.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossThrows) {
  TensorD w = TensorD::from({2}, {1, 2}).set_requires_grad(true);
  EXPECT_THROW(ad::backward(ad::mul(w, w)), npdraw::ShapeError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  TensorD w = TensorD::from({1}, {3.0}).set_requires_grad(true);
  TensorD y = ad::mul(w, w);
  ad::backward(ad::sum(ad::add(y, y)));  // d/dw 2w^2 = 4w
  EXPECT_DOUBLE_EQ(w.grad()[0], 12.0);
}

TEST(Backward, UnreachableParameterGetsZeroGradAfterZeroGrad) {
  ad::ParameterSet<double> ps;
  TensorD a = ps.add_parameter("a", TensorD::from({1}, {1.0}));
  TensorD b = ps.add_parameter("b", TensorD::from({1}, {1.0}));
  ps.zero_grad();
  ad::backward(ad::sum(ad::mul(a, a)));
  EXPECT_EQ(a.grad()[0], 2.0);
  ASSERT_TRUE(b.has_grad());
  EXPECT_EQ(b.grad()[0], 0.0);
}

TEST(Backward, NoGradGuardStopsRecording) {
  TensorD w = TensorD::from({1}, {1.0}).set_requires_grad(true);
  ad::NoGradGuard g;
  EXPECT_FALSE(ad::mul(w, w).requires_grad());
}

TEST(Backward, ConvAgainstFiniteDifferences) {
  std::mt19937_64 rng(11);
  TensorD x = random_tensor({1, 1, 6, 6}, rng).set_requires_grad(false);
  TensorD w = random_tensor({1, 1, 3, 3}, rng);
  const double err = gradcheck([&](const std::vector<TensorD>& in) { return ad::sum(ad::conv2d(x, in[0], TensorD(), 1, 0)); }, {w});
  EXPECT_LT(err, 1e-4);
}

TEST(Properties, WindowMeansEqualsMeanPooledConv) {
  std::mt19937_64 rng(12);
  for (int pad = 0; pad <= 2; ++pad) {
    TensorD x = random_tensor({3, 2, 7, 5}, rng).set_requires_grad(false);
    TensorD w = random_tensor({4, 2, 3, 3}, rng).set_requires_grad(false);
    TensorD b = random_tensor({4}, rng).set_requires_grad(false);
    const TensorD conv = ad::conv2d(x, w, b, 1, pad);
    const TensorD pooled = ad::mean(ad::reshape(conv, {3, 4, conv.dim(2) * conv.dim(3)}), 2);
    const TensorD fast = ad::add(ad::matmul(ad::window_means(x, 3, 3, pad), ad::permute(ad::reshape(w, {4, 18}), {1, 0})), b);
    ASSERT_EQ(fast.shape(), pooled.shape());
    for (std::size_t i = 0; i < fast.numel(); ++i) EXPECT_NEAR(fast.at(i), pooled.at(i), 1e-12);
  }
}

class OpGradient : public ::testing::TestWithParam<std::size_t> {};

TEST_P(OpGradient, TwentyRandomInstances) {
  const auto cases = npdraw::testing::differentiable_op_cases();
  const auto& c = cases.at(GetParam());
  std::mt19937_64 rng(1000 + GetParam());
  for (int i = 0; i < 20; ++i) EXPECT_LT(c.run(rng), 1e-4) << c.name << " instance " << i;
}

INSTANTIATE_TEST_SUITE_P(All, OpGradient,
                         ::testing::Range<std::size_t>(0, npdraw::testing::differentiable_op_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return npdraw::testing::differentiable_op_cases()[info.param].name;
                         });

TEST(Registry, DispatchesByName) {
  TensorF a = TensorF::from({2}, {1, -2});
  TensorF b = TensorF::from({2}, {3, 4});
  EXPECT_EQ(ad::forward_op<float>("add", {a, b}).values(), (std::vector<float>{4, 2}));
  EXPECT_EQ(ad::forward_op<float>("relu", {a}).values(), (std::vector<float>{1, 0}));
  ad::OpAttrs attrs;
  attrs.set("stride", 2L).set("padding", 1L);
  TensorF x = TensorF::zeros({1, 1, 28, 28}), w = TensorF::zeros({4, 1, 3, 3});
  EXPECT_EQ(ad::forward_op<float>("conv2d", {x, w}, attrs).shape(), (ad::Shape{1, 4, 14, 14}));
}

TEST(Registry, UnknownKindThrows) {
  EXPECT_THROW(ad::forward_op<float>("fft", {TensorF::zeros({2})}), ad::UnknownOpError);
}

TEST(Registry, CoversRequiredKinds) {
  const auto ops = ad::known_ops();
  for (const char* k : {"add", "mul", "matmul", "conv2d", "conv_transpose2d", "batch_norm", "relu", "sigmoid",
                        "softmax", "log_softmax", "layer_norm", "dropout", "attention", "reshape", "concat", "slice",
                        "maximum", "mean", "sum", "embedding", "window_means"}) {
    EXPECT_NE(std::find(ops.begin(), ops.end(), k), ops.end()) << k;
  }
}

TEST(Properties, BatchNormEvalIsAffine) {
  std::mt19937_64 rng(3);
  TensorD g = random_tensor({2}, rng), b = random_tensor({2}, rng);
  TensorD rm = TensorD::from({2}, {0.3, -0.2}), rv = TensorD::from({2}, {2.0, 0.5});
  TensorD x = random_tensor({4, 2, 3, 3}, rng);
  TensorD y = ad::batch_norm(x, g, b, rm, rv, false);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 9; ++i) {
        const std::size_t at = (n * 2 + c) * 9 + i;
        const double expect = (x.at(at) - rm.at(c)) / std::sqrt(rv.at(c) + 1e-5) * g.at(c) + b.at(c);
        EXPECT_NEAR(y.at(at), expect, 1e-12);
      }
  EXPECT_EQ(rm.at(0), 0.3);  // eval leaves running stats alone
}

TEST(Properties, BatchNormTrainUpdatesRunningStats) {
  TensorD x = TensorD::from({4, 1}, {1, 2, 3, 4});
  TensorD g = TensorD::full({1}, 1), b = TensorD::zeros({1});
  TensorD rm = TensorD::zeros({1}), rv = TensorD::full({1}, 1);
  ad::batch_norm(x, g, b, rm, rv, true);
  EXPECT_NEAR(rm.at(0), 0.25, 1e-12);
  EXPECT_NEAR(rv.at(0), 0.9 + 0.1 * (5.0 / 3.0), 1e-12);  // unbiased batch variance
}

TEST(Properties, DropoutEvalIsIdentity) {
  std::mt19937_64 rng(5);
  TensorD x = random_tensor({3, 5}, rng);
  EXPECT_EQ(ad::dropout(x, 0.5, false, rng).values(), x.values());
}

TEST(Properties, SeededDeterminism) {
  auto run = [] {
    std::mt19937_64 rng(42);
    TensorF x = ad::uniform_tensor<float>({2, 3, 8, 8}, 1.0, rng);
    TensorF w = ad::uniform_tensor<float>({4, 3, 3, 3}, 0.5, rng);
    TensorF y = ad::dropout(ad::relu(ad::conv2d(x, w, TensorF(), 1, 1)), 0.2, true, rng);
    return ad::gumbel_softmax_sample(ad::reshape(y, {2, 256}), 1.0, true, rng).values();
  };
  EXPECT_EQ(run(), run());
}

TEST(Gumbel, SoftSampleOnSimplex) {
  std::mt19937_64 rng(9);
  TensorD l = random_tensor({50, 7}, rng, -5, 5);
  TensorD s = ad::gumbel_softmax_sample(l, 0.5, false, rng);
  for (std::size_t r = 0; r < 50; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 7; ++j) total += s.at(r * 7 + j);
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Gumbel, HardIsOneHotWithSoftGradient) {
  std::mt19937_64 rng(10);
  TensorD l = random_tensor({1, 4}, rng);
  TensorD s = ad::gumbel_softmax_sample(l, 1.0, true, rng);
  int ones = 0;
  for (double v : s.values()) {
    EXPECT_TRUE(v == 0.0 || v == 1.0);
    ones += v == 1.0;
  }
  EXPECT_EQ(ones, 1);
  ad::backward(npdraw::testing::project(s, 3));
  double mag = 0;
  for (double g : l.grad()) mag += std::abs(g);
  EXPECT_GT(mag, 0.0);
}

TEST(Gumbel, LowTemperatureMatchesNoisyArgmax) {
  // Same seed: the hard sample's argmax is the argmax of logits + gumbel noise
  // regardless of temperature, and a tiny temperature makes the soft sample one-hot.
  std::mt19937_64 a(77), b(77);
  TensorD l = TensorD::from({1, 5}, {0.1, 0.5, -0.3, 0.2, 0.0});
  TensorD soft = ad::gumbel_softmax_sample(l, 1e-4, false, a);
  TensorD hard = ad::gumbel_softmax_sample(l, 1.0, true, b);
  for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(soft.at(j), hard.at(j), 1e-9);
}

TEST(Gumbel, UniformFrequenciesWithinThreeSigma) {
  const std::size_t m = 6, n = 100000;
  std::mt19937_64 rng(2024);
  TensorD l = TensorD::zeros({n, m});
  TensorD s = ad::gumbel_softmax_sample(l, 1.0, true, rng);
  std::vector<double> counts(m, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) counts[j] += s.at(i * m + j);
  const double p = 1.0 / m, sd = std::sqrt(n * p * (1 - p));
  for (double c : counts) EXPECT_LT(std::abs(c - n * p), 3 * sd);
}

TEST(Gumbel, BinaryConcreteFrequency) {
  const std::size_t n = 100000;
  std::mt19937_64 rng(99);
  TensorD l = TensorD::full({n}, std::log(0.3 / 0.7));
  TensorD s = ad::binary_concrete_sample(l, 1.0, true, rng);
  double ones = 0;
  for (double v : s.values()) ones += v;
  EXPECT_LT(std::abs(ones - 0.3 * n), 3 * std::sqrt(n * 0.3 * 0.7));
}

TEST(Gumbel, NonPositiveTemperatureThrows) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(ad::gumbel_softmax_sample(TensorD::zeros({3}), 0.0, true, rng), std::invalid_argument);
  EXPECT_THROW(ad::binary_concrete_sample(TensorD::zeros({3}), -1.0, true, rng), std::invalid_argument);
}

TEST(Adam, FirstStepMovesByLr) {
  ad::ParameterSet<double> ps;
  TensorD w = ps.add_parameter("w", TensorD::scalar(0.5));
  w.grad_buffer()[0] = 1.0;
  ad::AdamState<double> st;
  ad::adam_step(ps.parameters(), st);
  EXPECT_NEAR(w.item(), 0.5 - 1e-3, 1e-9);
  EXPECT_EQ(st.step, 1u);
  EXPECT_EQ(w.grad()[0], 0.0);
}

TEST(Adam, ZeroGradIsFixedPoint) {
  ad::ParameterSet<double> ps;
  TensorD w = ps.add_parameter("w", TensorD::scalar(0.5));
  ps.zero_grad();
  ad::AdamState<double> st;
  ad::adam_step(ps.parameters(), st);
  EXPECT_EQ(w.item(), 0.5);
}

TEST(Adam, MissingGradThrows) {
  ad::ParameterSet<double> ps;
  ps.add_parameter("w", TensorD::scalar(0.5));
  ad::AdamState<double> st;
  EXPECT_THROW(ad::adam_step(ps.parameters(), st), std::logic_error);
}

TEST(Adam, ConvergesOnQuadraticBowl) {
  ad::ParameterSet<double> ps;
  TensorD w = ps.add_parameter("w", TensorD::scalar(1.0));
  ad::AdamState<double> st;
  st.lr = 1e-2;
  for (int i = 0; i < 500; ++i) {
    ad::backward(ad::mul(w, w));
    ad::adam_step(ps.parameters(), st);
  }
  EXPECT_LT(std::abs(w.item()), 1e-2);
}

TEST(Nn, DuplicateParameterNameThrows) {
  ad::ParameterSet<float> ps;
  ps.add_parameter("a", TensorF::zeros({1}));
  EXPECT_THROW(ps.add_buffer("a", TensorF::zeros({1})), std::invalid_argument);
}

TEST(Nn, TransformerRejectsIndivisibleHeads) {
  ad::ParameterSet<float> ps;
  std::mt19937_64 rng(1);
  EXPECT_THROW(ad::TransformerBlock<float>(ps, "b", 10, 4, 16, 0.0, rng), std::invalid_argument);
}

TEST(Nn, CausalMaskShape) {
  TensorF m = ad::causal_mask<float>(3);
  EXPECT_EQ(m.at(1), -std::numeric_limits<float>::infinity());
  EXPECT_EQ(m.at(3), 0.0f);
}
