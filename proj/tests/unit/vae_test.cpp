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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "gradcheck.hpp"
#include "npdraw/vae.hpp"

using namespace npdraw;
using ad::Tensor;

namespace {

PartBank random_bank(std::size_t k, std::size_t m, std::size_t channels, std::mt19937_64& rng) {
  PartBank b;
  b.patch_size = k;
  b.channels = channels;
  std::uniform_real_distribution<float> u(0.05f, 1.0f);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<float> p(k * k * channels);
    for (auto& v : p) v = u(rng);
    b.parts.push_back(p);
  }
  return b;
}

std::vector<Image> random_images(std::size_t n, std::size_t h, std::size_t w, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image im = Image::zeros(h, w, c);
    for (auto& v : im.pixels) v = std::round(u(rng) * 255.0f) / 255.0f;
    out.push_back(im);
  }
  return out;
}

std::vector<LatentProgram> grid_programs(std::size_t n, std::size_t steps, std::size_t m, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::uint32_t> id(1, static_cast<std::uint32_t>(m));
  std::bernoulli_distribution draw(0.4);
  std::vector<LatentProgram> out(n);
  for (auto& p : out)
    for (std::size_t t = 0; t < steps; ++t) p.tokens.push_back({static_cast<std::uint32_t>(t + 1), id(rng), draw(rng)});
  return out;
}

template <class T>
struct Toy {
  GridGeometry geom;
  PartBank bank;
  PriorModel<T> prior;
  FullModel<T> model;
};

template <class T>
Toy<T> make_toy(std::size_t image, std::size_t patch, std::size_t m, std::size_t channels = 1,
                OutputDist output = OutputDist::Bernoulli, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  Toy<T> toy;
  toy.geom = make_geometry(image, image, patch);
  toy.bank = random_bank(patch, m, channels, rng);
  auto pc = PriorConfig::for_geometry(toy.geom, m, channels);
  pc.layers = 1;
  pc.hidden = 8;
  pc.heads = 2;
  pc.ff = 16;
  pc.cnn_hidden = 4;
  pc.head_hidden = 8;
  toy.prior = PriorModel<T>(pc, seed + 1);
  VaeConfig vc;
  vc.hidden = 8;
  vc.head_hidden = 8;
  vc.output = output;
  vc.mixtures = 2;
  toy.model = FullModel<T>(vc, toy.bank, toy.geom, toy.prior, seed + 2);
  return toy;
}

std::vector<std::vector<float>> values_of(const ad::ParameterSet<float>& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& p : ps.parameters()) out.push_back(p.tensor.values());
  for (const auto& b : ps.buffers()) out.push_back(b.tensor.values());
  return out;
}

double logistic_cdf(double u) { return 1.0 / (1.0 + std::exp(-u)); }

}  // namespace

TEST(VaeConfig, JsonRoundTripAndValidation) {
  VaeConfig c;
  c.lambda_reg = 500;
  c.output = OutputDist::LogisticMixture;
  const auto back = VaeConfig::from_json(c.to_json());
  EXPECT_EQ(back.lambda_reg, 500);
  EXPECT_EQ(back.output, OutputDist::LogisticMixture);
  c.lambda_reg = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(output_dist_from_string("gaussian"), std::invalid_argument);
}

TEST(Encoder, StepsAreNormalizedAndDeterministicInEval) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(2);
  auto imgs = random_images(1, 10, 10, 1, rng);
  imgs.push_back(imgs[0]);
  const auto q = toy.model.encode(images_to_tensor<float>(imgs, toy.geom), false);
  const std::size_t steps = toy.geom.T, m = 3;
  ASSERT_EQ(q.log_p_id.shape(), (ad::Shape{2, steps, m}));
  ASSERT_EQ(q.log_p_loc.shape(), (ad::Shape{2, steps, steps}));
  ASSERT_EQ(q.logit_is.shape(), (ad::Shape{2, steps}));
  for (std::size_t r = 0; r < 2 * steps; ++r) {
    double sid = 0, sloc = 0;
    for (std::size_t j = 0; j < m; ++j) sid += std::exp(q.log_p_id.values()[r * m + j]);
    for (std::size_t j = 0; j < steps; ++j) sloc += std::exp(q.log_p_loc.values()[r * steps + j]);
    EXPECT_NEAR(sid, 1.0, 1e-6);
    EXPECT_NEAR(sloc, 1.0, 1e-6);
  }
  for (std::size_t i = 0; i < steps * m; ++i) EXPECT_EQ(q.log_p_id.values()[i], q.log_p_id.values()[steps * m + i]);
}

TEST(Encoder, RejectsWrongShape) {
  auto toy = make_toy<float>(10, 5, 3);
  EXPECT_THROW(toy.model.encode(Tensor<float>::zeros({1, 1, 9, 10}), false), npdraw::ShapeError);
  std::mt19937_64 rng(1);
  EXPECT_THROW(images_to_tensor<float>(random_images(1, 8, 10, 1, rng), toy.geom), std::invalid_argument);
}

TEST(Decoder, OutputMatchesCanvasShapeAndIsFinite) {
  for (auto dist : {OutputDist::Bernoulli, OutputDist::LogisticMixture}) {
    auto toy = make_toy<float>(28, 5, 4, dist == OutputDist::Bernoulli ? 1 : 3, dist);
    const auto out = toy.model.decode(Tensor<float>::zeros({2, toy.bank.channels, 30, 30}), false);
    EXPECT_EQ(out.shape(), (ad::Shape{2, toy.model.decoder_channels(), 30, 30}));
    for (float v : out.values()) ASSERT_TRUE(std::isfinite(v));
    const auto mean = toy.model.decode_mean(empty_canvas(toy.geom, toy.bank.channels));
    EXPECT_EQ(mean.height, 30u);
    for (float v : mean.pixels) EXPECT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Decoder, ComposeWithNoCellsDecodesIdentically) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(4);
  const auto progs = grid_programs(2, toy.geom.T, 3, rng);
  const auto a = render_program(progs[0], toy.bank, toy.geom);
  const auto b = render_program(progs[1], toy.bank, toy.geom);
  EXPECT_EQ(toy.model.decode_mean(compose_canvases(a, b, {}, toy.geom)), toy.model.decode_mean(a));
}

TEST(Render, HardTokensMatchDiscreteRendererAndPriorFrames) {
  auto toy = make_toy<double>(10, 5, 3);
  std::mt19937_64 rng(5);
  std::vector<LatentProgram> progs;
  std::uniform_int_distribution<std::uint32_t> loc(1, 4), id(1, 3);
  for (int i = 0; i < 3; ++i) {
    LatentProgram p;
    for (int t = 0; t < 4; ++t) p.tokens.push_back({loc(rng), id(rng), (t + i) % 3 != 0});
    progs.push_back(p);
  }
  const auto tok = one_hot_tokens<double>(progs, 3, 4);
  const auto r = toy.model.render(tok);
  const auto frames = program_frames<double>(progs, toy.bank, toy.geom);
  ASSERT_EQ(r.frames.shape(), frames.shape());
  for (std::size_t i = 0; i < frames.numel(); ++i) ASSERT_NEAR(r.frames.values()[i], frames.values()[i], 1e-6);
  const auto want = canvases_to_tensor<double>({render_program(progs[0], toy.bank, toy.geom),
                                                render_program(progs[1], toy.bank, toy.geom),
                                                render_program(progs[2], toy.bank, toy.geom)});
  for (std::size_t i = 0; i < want.numel(); ++i) ASSERT_NEAR(r.canvas.values()[i], want.values()[i], 1e-6);
}

TEST(Likelihood, BernoulliAtHalfIsLogHalfPerPixel) {
  const auto x = Tensor<double>::full({1, 1, 4, 4}, 1.0);
  const auto lp = ad::bernoulli_logprob(x, Tensor<double>::zeros({1, 1, 4, 4}));
  for (double v : lp.values()) EXPECT_NEAR(v, std::log(0.5), 1e-12);
}

TEST(Likelihood, LogisticEdgeBinMatchesQuadrature) {
  // Single component, scale 0.1, pixel 0 (target -1) for two means.
  for (double mu : {0.0, -0.98}) {
    const double s = 0.1, upper = -1.0 + 1.0 / 255.0;
    const auto params = Tensor<double>::from({1, 3, 1, 1}, {0.0, mu, std::log(s)});
    const double got = ad::logistic_mixture_logprob(Tensor<double>::full({1, 1, 1, 1}, -1.0), params, 1).item();
    // Composite Simpson of the logistic density over [upper - 60 s, upper].
    const std::size_t n = 600000;
    const double lo = upper - 60 * s, h = (upper - lo) / n;
    auto f = [&](double x) {
      const double u = (x - mu) / s;
      const double e = std::exp(-std::abs(u));
      return e / (s * (1 + e) * (1 + e));
    };
    double acc = f(lo) + f(upper);
    for (std::size_t i = 1; i < n; ++i) acc += f(lo + i * h) * (i % 2 ? 4 : 2);
    const double integral = acc * h / 3;
    EXPECT_NEAR(got, std::log(integral), 1e-6) << "mu " << mu;
    EXPECT_NEAR(got, std::log(logistic_cdf((upper - mu) / s)), 1e-9);
  }
}

TEST(Likelihood, LogisticMixtureSumsToOneOverAllLevels) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  // One channel: 256 values as a 1 x 1 x 1 x 256 image with shared parameters.
  for (int trial = 0; trial < 3; ++trial) {
    const int k = 5;
    std::vector<double> p(3 * k);
    for (int j = 0; j < k; ++j) {
      p[j] = nd(rng);
      p[k + j] = std::clamp(0.7 * nd(rng), -1.0, 1.0);
      p[2 * k + j] = -3.0 + nd(rng);
    }
    std::vector<double> target(256), params(3 * k * 256);
    for (int v = 0; v < 256; ++v) {
      target[v] = 2.0 * v / 255.0 - 1.0;
      for (int c = 0; c < 3 * k; ++c) params[c * 256 + v] = p[c];
    }
    const auto lp = ad::logistic_mixture_logprob(Tensor<double>::from({1, 1, 1, 256}, target),
                                                 Tensor<double>::from({1, 3 * k, 1, 256}, params), k);
    double total = 0;
    for (double v : lp.values()) total += std::exp(v);
    EXPECT_NEAR(total, 1.0, 1e-4);
  }
  // Two channels: every one of the 65536 joint values.
  const int k = 3, c = 2, cells = 65536;
  std::vector<double> p(k * (1 + 2 * c));
  for (auto& v : p) v = 0.5 * nd(rng);
  std::vector<double> target(c * cells), params(p.size() * cells);
  for (int a = 0; a < 256; ++a)
    for (int b = 0; b < 256; ++b) {
      const int at = a * 256 + b;
      target[at] = 2.0 * a / 255.0 - 1.0;
      target[cells + at] = 2.0 * b / 255.0 - 1.0;
      for (std::size_t j = 0; j < p.size(); ++j) params[j * cells + at] = p[j];
    }
  const auto lp = ad::logistic_mixture_logprob(Tensor<double>::from({1, 2, 256, 256}, target),
                                               Tensor<double>::from({1, p.size(), 256, 256}, params), k);
  double total = 0;
  for (double v : lp.values()) total += std::exp(v);
  EXPECT_NEAR(total, 1.0, 1e-4);
}

TEST(Posterior, HardSamplesAreValidTokensAndCertainDrawsAlwaysDraw) {
  const std::size_t b = 4, steps = 6, m = 3;
  std::mt19937_64 rng(3);
  StepConditionals<float> q;
  q.log_p_id = Tensor<float>::from({b, steps, m}, std::vector<float>(b * steps * m, std::log(1.0f / m)));
  q.log_p_loc = Tensor<float>::from({b, steps, steps}, std::vector<float>(b * steps * steps, std::log(1.0f / steps)));
  q.logit_is = Tensor<float>::full({b, steps}, std::numeric_limits<float>::infinity());
  for (int rep = 0; rep < 20; ++rep) {
    const auto z = sample_posterior(q, 1.0, true, rng);
    for (float v : z.is.values()) EXPECT_EQ(v, 1.0f);
    const auto progs = tokens_to_programs(z);
    ASSERT_EQ(progs.size(), b);
    for (const auto& p : progs) {
      EXPECT_NO_THROW(validate_program(p, make_geometry(10, 15, 5), m));
      for (const auto& t : p.tokens) EXPECT_TRUE(t.z_is);
    }
  }
}

TEST(Loss, KlIsZeroInExpectationWhenPosteriorEqualsPrior) {
  // T = 1, M = 2: a single 2 x 2 cell.
  auto toy = make_toy<double>(2, 2, 2);
  ASSERT_EQ(toy.geom.T, 1u);
  const std::size_t n = 10000;
  const auto p = toy.model.prior().forward(Tensor<double>::zeros({1, 1, 2, 2, 2}));
  StepConditionals<double> q;
  q.log_p_id = ad::add(Tensor<double>::zeros({n, 1, 2}), p.log_p_id);
  q.log_p_loc = ad::add(Tensor<double>::zeros({n, 1, 1}), p.log_p_loc);
  q.logit_is = ad::add(Tensor<double>::zeros({n, 1}), p.logit_is);
  std::mt19937_64 rng(11);
  const auto s = toy.model.sample_terms(q, Tensor<double>::full({n, 1, 2, 2}, 0.5), rng, false, true);
  double mean = 0, sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double kl = s.log_post.values()[i] - s.log_prior.values()[i];
    mean += kl;
    sq += kl * kl;
  }
  mean /= n;
  const double se = std::sqrt(std::max(0.0, sq / n - mean * mean) / n);
  EXPECT_LE(std::abs(mean), 3 * se + 1e-12);
}

TEST(Loss, EnumeratedElboBoundsEvidenceAndMatchesMonteCarlo) {
  auto toy = make_toy<double>(2, 2, 2, 1, OutputDist::Bernoulli, 4);
  auto& model = toy.model;
  std::mt19937_64 rng(6);
  const auto x = images_to_tensor<double>(random_images(1, 2, 2, 1, rng), toy.geom);
  ad::NoGradGuard guard;
  const auto q = model.encode(x, false);
  // Outcomes: skip, draw part 1, draw part 2.
  std::vector<LatentProgram> outcomes(3);
  outcomes[0].tokens = {{1, 1, false}};
  outcomes[1].tokens = {{1, 1, true}};
  outcomes[2].tokens = {{1, 2, true}};
  double elbo = 0, q_total = 0;
  std::vector<double> joint;
  for (const auto& prog : outcomes) {
    const auto tok = one_hot_tokens<double>({prog}, 2, 1);
    const double lq = ad::sum(step_logprob(q, tok)).item();
    const auto r = model.render(tok);
    const double lp = model.prior_log_prob(tok, r).item();
    const double lx = model.log_likelihood(x, r.canvas, false).item();
    q_total += std::exp(lq);
    elbo += std::exp(lq) * (lx + lp - lq);
    joint.push_back(lx + lp);
  }
  EXPECT_NEAR(q_total, 1.0, 1e-9);
  const double top = *std::max_element(joint.begin(), joint.end());
  double acc = 0;
  for (double v : joint) acc += std::exp(v - top);
  const double evidence = top + std::log(acc);
  EXPECT_LE(elbo, evidence + 1e-12);

  const std::size_t n = 4000;
  std::vector<double> rep(n * 4);
  for (std::size_t i = 0; i < n; ++i) std::copy(x.values().begin(), x.values().end(), rep.begin() + i * 4);
  const auto xs = Tensor<double>::from({n, 1, 2, 2}, rep);
  StepConditionals<double> qs{ad::add(Tensor<double>::zeros({n, 1, 2}), q.log_p_id),
                              ad::add(Tensor<double>::zeros({n, 1, 1}), q.log_p_loc),
                              ad::add(Tensor<double>::zeros({n, 1}), q.logit_is)};
  const auto s = model.sample_terms(qs, xs, rng, false, true);
  double mean = 0, sq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = s.recon.values()[i] + s.log_prior.values()[i] - s.log_post.values()[i];
    mean += e;
    sq += e * e;
  }
  mean /= n;
  const double se = std::sqrt((sq / n - mean * mean) / n);
  EXPECT_LE(std::abs(mean - elbo), 3 * se + 1e-9);
}

TEST(Loss, RegularizerIsNonPositive) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(8);
  const auto imgs = random_images(4, 10, 10, 1, rng);
  const auto progs = grid_programs(4, toy.geom.T, 3, rng);
  const auto terms = toy.model.loss(images_to_tensor<float>(imgs, toy.geom), one_hot_tokens<float>(progs, 3, 4), rng,
                                    true);
  EXPECT_LE(terms.reg, 0.0);
  EXPECT_TRUE(std::isfinite(terms.loss.item()));
  EXPECT_NEAR(terms.elbo, terms.recon - terms.kl, 1e-3);
}

TEST(Loss, SoftRelaxedLossGradientMatchesFiniteDifferences) {
  for (auto dist : {OutputDist::Bernoulli, OutputDist::LogisticMixture}) {
    auto toy = make_toy<double>(4, 2, 3, dist == OutputDist::Bernoulli ? 1 : 2, dist, 12);
    auto& model = toy.model;
    model.config().hard = false;
    std::mt19937_64 data_rng(13);
    const auto x = images_to_tensor<double>(random_images(3, 4, 4, toy.bank.channels, data_rng), toy.geom);
    const auto parsed = one_hot_tokens<double>(grid_programs(3, toy.geom.T, 3, data_rng), 3, toy.geom.T);
    auto eval = [&] {
      std::mt19937_64 rng(99);
      return model.loss(x, parsed, rng, true).loss;
    };
    auto& params = model.params().parameters();
    model.params().zero_grad();
    ad::backward(eval());
    std::mt19937_64 pick(14);
    double worst = 0;
    for (int trial = 0; trial < 60; ++trial) {
      auto& p = params[std::uniform_int_distribution<std::size_t>(0, params.size() - 1)(pick)];
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, p.tensor.numel() - 1)(pick);
      const double analytic = p.tensor.grad()[i];
      ad::NoGradGuard guard;
      auto& v = p.tensor.values();
      const double keep = v[i], h = 1e-5;  // near eps^(1/3): balances truncation against roundoff of a ~1e3 loss
      v[i] = keep + h;
      const double up = eval().item();
      v[i] = keep - h;
      const double down = eval().item();
      v[i] = keep;
      worst = std::max(worst, npdraw::testing::rel_err(analytic, (up - down) / (2 * h)));
    }
    EXPECT_LT(worst, 1e-3) << to_string(dist);
  }
}

TEST(Loss, GradientsSkipTheFrozenPrior) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(15);
  const auto x = images_to_tensor<float>(random_images(2, 10, 10, 1, rng), toy.geom);
  const auto parsed = one_hot_tokens<float>(grid_programs(2, 4, 3, rng), 3, 4);
  ad::backward(toy.model.loss(x, parsed, rng, true).loss);
  for (const auto& p : toy.model.prior().params().parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
  for (const auto& p : toy.model.params().parameters()) EXPECT_TRUE(p.tensor.has_grad()) << p.name;
}

TEST(Train, PriorStaysBitIdenticalAndHistoryIsRecorded) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(16);
  const auto imgs = random_images(20, 10, 10, 1, rng);
  const auto progs = grid_programs(20, 4, 3, rng);
  const auto before = values_of(toy.prior.params());
  const auto inside = values_of(toy.model.prior().params());
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 8;
  TrainState state;
  train_full(toy.model, imgs, progs, cfg, state);
  EXPECT_EQ(values_of(toy.model.prior().params()), inside);
  EXPECT_EQ(values_of(toy.prior.params()), before);
  EXPECT_EQ(inside, before);
  ASSERT_EQ(state.history.size(), 3u);
  EXPECT_GE(state.best_epoch, 1u);
  for (const auto& r : state.history) EXPECT_TRUE(std::isfinite(r.loss) && std::isfinite(r.val_loss));
}

TEST(Train, RejectsEmptyOrMismatchedData) {
  auto toy = make_toy<float>(10, 5, 3);
  TrainState state;
  EXPECT_THROW(train_full(toy.model, {}, {}, TrainConfig{}, state), std::invalid_argument);
  std::mt19937_64 rng(1);
  EXPECT_THROW(train_full(toy.model, random_images(2, 10, 10, 1, rng), {}, TrainConfig{}, state),
               std::invalid_argument);
}

TEST(Train, ResumeReproducesTheUninterruptedRun) {
  std::mt19937_64 rng(17);
  const auto imgs = random_images(24, 10, 10, 1, rng);
  const auto progs = grid_programs(24, 4, 3, rng);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 8;
  cfg.seed = 5;

  auto full = make_toy<float>(10, 5, 3);
  TrainState full_state;
  train_full(full.model, imgs, progs, cfg, full_state);

  auto first = make_toy<float>(10, 5, 3);
  TrainState state;
  train_full(first.model, imgs, progs, cfg, state, [](const EpochRecord& r, const TrainState&) { return r.epoch < 1; });
  ASSERT_EQ(state.epoch, 1u);
  // Continue in a differently initialized model after copying the state over.
  FullModel<float> resumed(first.model.config(), first.bank, first.geom, first.prior, 40);
  const auto saved = values_of(first.model.params());
  std::size_t i = 0;
  for (auto& p : resumed.params().parameters()) p.tensor.values() = saved[i++];
  for (auto& b : resumed.params().buffers()) b.tensor.values() = saved[i++];
  train_full(resumed, imgs, progs, cfg, state);
  ASSERT_EQ(state.history.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_FLOAT_EQ(state.history[e].loss, full_state.history[e].loss);
    EXPECT_FLOAT_EQ(state.history[e].val_loss, full_state.history[e].val_loss);
  }
  EXPECT_EQ(values_of(resumed.params()), values_of(full.model.params()));
}

TEST(Iwae, SingleSampleEqualsTheElboDrawAndMoreSamplesTighten) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(18);
  const auto imgs = random_images(30, 10, 10, 1, rng);
  const auto k1 = eval_nll_iwae(toy.model, imgs, 1, 21);
  std::mt19937_64 same(21);
  ad::NoGradGuard guard;
  const auto s = toy.model.sample_terms(images_to_tensor<float>(imgs, toy.geom), same, false, true);
  ASSERT_EQ(k1.bounds.size(), 30u);
  for (std::size_t i = 0; i < 30; ++i) {
    const double elbo = double(s.recon.values()[i]) + s.log_prior.values()[i] - s.log_post.values()[i];
    EXPECT_NEAR(k1.bounds[i], elbo, 1e-9);
  }
  EXPECT_NEAR(k1.nll, -k1.mean_bound, 1e-12);
  const auto k20 = eval_nll_iwae(toy.model, imgs, 20, 22);
  std::vector<double> diff(30);
  for (std::size_t i = 0; i < 30; ++i) diff[i] = k20.bounds[i] - k1.bounds[i];
  const double mean = std::accumulate(diff.begin(), diff.end(), 0.0) / 30;
  double var = 0;
  for (double d : diff) var += (d - mean) * (d - mean);
  EXPECT_GE(mean, -3 * std::sqrt(var / 29 / 30));
  EXPECT_THROW(eval_nll_iwae(toy.model, imgs, 0, 1), std::invalid_argument);
}

TEST(Iwae, ColorReportsBitsPerDim) {
  auto toy = make_toy<float>(10, 5, 3, 3, OutputDist::LogisticMixture);
  std::mt19937_64 rng(19);
  const auto imgs = random_images(4, 10, 10, 3, rng);
  const auto r = eval_nll_iwae(toy.model, imgs, 2, 3);
  EXPECT_NEAR(r.nll, -r.mean_bound / (3 * 100 * std::log(2.0)), 1e-9);
  EXPECT_GT(r.nll, 0.0);
}

TEST(Agreement, CountsIsAndIdMatchesPerStep) {
  auto toy = make_toy<float>(10, 5, 3);
  std::mt19937_64 rng(20);
  const auto imgs = random_images(3, 10, 10, 1, rng);
  std::vector<LatentProgram> progs;
  for (const auto& im : imgs) progs.push_back(toy.model.encode_argmax(im));
  EXPECT_DOUBLE_EQ(parse_agreement(toy.model, imgs, progs), 1.0);
  for (auto& p : progs)
    for (auto& t : p.tokens) t.z_is = !t.z_is;
  EXPECT_DOUBLE_EQ(parse_agreement(toy.model, imgs, progs), 0.0);
}
