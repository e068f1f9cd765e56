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

#include "npdraw/prior.hpp"

using namespace npdraw;
using ad::Tensor;

namespace {

PartBank random_bank(std::size_t k, std::size_t m, std::mt19937_64& rng) {
  PartBank b;
  b.patch_size = k;
  std::uniform_real_distribution<float> u(0.05f, 1.0f);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<float> p(k * k);
    for (auto& v : p) v = u(rng);
    b.parts.push_back(p);
  }
  return b;
}

LatentProgram random_program(std::size_t steps, std::size_t m, std::mt19937_64& rng, double p_draw = 0.5) {
  LatentProgram p;
  std::uniform_int_distribution<std::uint32_t> loc(1, static_cast<std::uint32_t>(steps));
  std::uniform_int_distribution<std::uint32_t> id(1, static_cast<std::uint32_t>(m));
  std::bernoulli_distribution draw(p_draw);
  for (std::size_t t = 0; t < steps; ++t) p.tokens.push_back({loc(rng), id(rng), draw(rng)});
  return p;
}

// A skipped step's z_id is unconstrained, so compare programs with it cleared.
LatentProgram drawn_only(LatentProgram p) {
  for (auto& t : p.tokens)
    if (!t.z_is) t.z_id = 1;
  return p;
}

PriorConfig small_config(const GridGeometry& g, std::size_t m, std::size_t layers = 2) {
  auto c = PriorConfig::for_geometry(g, m, 1);
  c.layers = layers;
  c.hidden = 16;
  c.heads = 4;
  c.ff = 32;
  c.cnn_hidden = 4;
  c.head_hidden = 16;
  return c;
}

}  // namespace

TEST(PriorStepInputs, FirstStepIsTheZeroStartFrame) {
  const auto g = make_geometry(28, 28, 5);
  const auto f = prior_step_inputs<float>({}, {}, g, 1);
  EXPECT_EQ(f.shape(), (ad::Shape{1, 2, 30, 30}));
  for (float v : f.values()) EXPECT_EQ(v, 0.0f);
}

TEST(PriorStepInputs, MaskMarksTheDrawnCellAndSkipsCopyTheCanvas) {
  const auto g = make_geometry(28, 28, 5);
  std::mt19937_64 rng(3);
  const auto bank = random_bank(5, 4, rng);
  const auto c1 = update_canvas(empty_canvas(g, 1), {3, 2, true}, bank, g);
  const auto c2 = update_canvas(c1, {9, 1, false}, bank, g);
  const auto f = prior_step_inputs<float>({c1, c2}, {3, 0}, g, 1);
  ASSERT_EQ(f.dim(0), 3u);
  const std::size_t hw = 900;
  const float* frame1 = f.values().data() + 2 * hw;
  const float* frame2 = f.values().data() + 4 * hw;
  const auto [r0, c0] = g.cell_origin(3);
  std::size_t ones = 0;
  for (std::size_t y = 0; y < 30; ++y)
    for (std::size_t x = 0; x < 30; ++x) {
      const float m = frame1[hw + y * 30 + x];
      const bool inside = y >= r0 && y < r0 + 5 && x >= c0 && x < c0 + 5;
      EXPECT_EQ(m, inside ? 1.0f : 0.0f);
      ones += m == 1.0f;
      EXPECT_EQ(frame1[y * 30 + x], c1.at(y, x));
      EXPECT_EQ(frame2[hw + y * 30 + x], 0.0f);
      EXPECT_EQ(frame2[y * 30 + x], frame1[y * 30 + x]);
    }
  EXPECT_EQ(ones, 25u);
}

TEST(PriorStepInputs, MisalignedHistoriesThrow) {
  const auto g = make_geometry(28, 28, 5);
  EXPECT_THROW(prior_step_inputs<float>({empty_canvas(g, 1)}, {}, g, 1), std::invalid_argument);
}

TEST(PriorConfig, RejectsIndivisibleHeadsAndBadGrid) {
  const auto g = make_geometry(28, 28, 5);
  auto c = PriorConfig::for_geometry(g, 16, 1);
  EXPECT_NO_THROW(c.validate());
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = PriorConfig::for_geometry(g, 16, 1);
  c.steps = 35;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  const auto round = PriorConfig::from_json(PriorConfig::for_geometry(g, 16, 1).to_json());
  EXPECT_EQ(round.to_json(), PriorConfig::for_geometry(g, 16, 1).to_json());
}

TEST(PriorModel, HeadsAreNormalized) {
  const auto g = make_geometry(28, 28, 5);
  PriorModel<float> model(small_config(g, 16), 1);
  std::mt19937_64 rng(2);
  auto frames = ad::uniform_tensor<float>({2, 7, 2, 30, 30}, 1.0, rng);
  const auto out = model.forward(frames);
  EXPECT_EQ(out.log_p_id.shape(), (ad::Shape{2, 7, 16}));
  EXPECT_EQ(out.log_p_loc.shape(), (ad::Shape{2, 7, 36}));
  EXPECT_EQ(out.logit_is.shape(), (ad::Shape{2, 7}));
  for (std::size_t r = 0; r < 14; ++r) {
    double sid = 0, sloc = 0;
    for (std::size_t j = 0; j < 16; ++j) sid += std::exp(static_cast<double>(out.log_p_id.values()[r * 16 + j]));
    for (std::size_t j = 0; j < 36; ++j) sloc += std::exp(static_cast<double>(out.log_p_loc.values()[r * 36 + j]));
    EXPECT_NEAR(sid, 1.0, 1e-6);
    EXPECT_NEAR(sloc, 1.0, 1e-6);
    EXPECT_TRUE(std::isfinite(out.logit_is.values()[r]));
  }
}

TEST(PriorModel, OutputsDependOnlyOnEarlierFrames) {
  const auto g = make_geometry(10, 10, 5);
  PriorModel<double> model(small_config(g, 3), 5);
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto frames = ad::uniform_tensor<double>({1, 4, 2, 10, 10}, 1.0, rng);
    const auto base = model.forward(frames);
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, 3)(rng);
    auto perturbed = frames.clone();
    for (std::size_t i = 0; i < 200; ++i) perturbed.values()[j * 200 + i] += 0.5;
    const auto out = model.forward(perturbed);
    for (std::size_t s = 0; s < 4; ++s) {
      bool same = true;
      for (std::size_t k = 0; k < 4; ++k) same = same && out.log_p_loc.values()[s * 4 + k] == base.log_p_loc.values()[s * 4 + k];
      same = same && out.logit_is.values()[s] == base.logit_is.values()[s];
      if (s < j) EXPECT_TRUE(same) << "position " << s << " changed after perturbing frame " << j;
      else EXPECT_FALSE(same) << "position " << s << " ignores frame " << j;
    }
  }
}

TEST(PriorModel, FreshInitGivesNearUniformNll) {
  const auto g = make_geometry(28, 28, 5);
  PriorModel<float> model(PriorConfig::for_geometry(g, 16, 1), 9);
  std::mt19937_64 rng(4);
  PartBank bank = random_bank(5, 16, rng);
  std::vector<LatentProgram> drawn, mixed;
  for (int i = 0; i < 8; ++i) drawn.push_back(random_program(36, 16, rng, 1.0));
  for (int i = 0; i < 8; ++i) mixed.push_back(random_program(36, 16, rng, 0.5));
  const double full = std::log(16.0) + std::log(36.0) + std::log(2.0);
  EXPECT_NEAR(prior_nll(model, drawn, bank, g) / 36.0, full, 0.2 * full);
  // A skipped step carries no appearance term.
  const double masked = 0.5 * std::log(16.0) + std::log(36.0) + std::log(2.0);
  EXPECT_NEAR(prior_nll(model, mixed, bank, g) / 36.0, masked, 0.2 * masked);
}

TEST(PriorModel, UniformHeadsGiveClosedFormLogprob) {
  const auto g = make_geometry(10, 15, 5);
  PriorModel<double> model(small_config(g, 4), 2);
  for (const char* head : {"prior.head_id", "prior.head_loc", "prior.head_is"}) {
    for (const char* part : {".fc2.weight", ".fc2.bias"}) {
      auto t = model.params().find(std::string(head) + part);
      std::fill(t.values().begin(), t.values().end(), 0.0);
    }
  }
  std::mt19937_64 rng(8);
  const auto bank = random_bank(5, 4, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_program(6, 4, rng);
    double expected = 0;
    for (const auto& t : p.tokens) expected -= (t.z_is ? std::log(4.0) : 0.0) + std::log(6.0) + std::log(2.0);
    EXPECT_NEAR(prior_logprob(model, p, bank, g), expected, 1e-9);
  }
}

TEST(PriorModel, TeacherForcedLossMatchesIncrementalConditionals) {
  const auto g = make_geometry(10, 10, 5);
  PriorModel<double> model(small_config(g, 3), 6);
  std::mt19937_64 rng(13);
  const auto bank = random_bank(5, 3, rng);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_program(4, 3, rng);
    const auto hist = render_history(p, bank, g);
    double incremental = 0;
    std::vector<Canvas> canvases;
    std::vector<std::size_t> locs;
    for (std::size_t t = 0; t < 4; ++t) {
      auto f = prior_step_inputs<double>(canvases, locs, g, 1);
      auto shape = f.shape();
      shape.insert(shape.begin(), 1);
      const auto out = model.forward(ad::reshape(f, shape));
      const auto& tok = p.tokens[t];
      const double l = out.logit_is.values()[t];
      incremental += out.log_p_loc.values()[t * 4 + tok.z_loc - 1];
      incremental += tok.z_is ? -std::log1p(std::exp(-l)) : -std::log1p(std::exp(l));
      if (tok.z_is) incremental += out.log_p_id.values()[t * 3 + tok.z_id - 1];
      canvases.push_back(hist[t + 1]);
      locs.push_back(tok.z_is ? tok.z_loc : 0);
    }
    EXPECT_NEAR(prior_nll(model, {p}, bank, g), -incremental, 1e-5);
    EXPECT_NEAR(prior_logprob(model, p, bank, g), incremental, 1e-5);
  }
}

TEST(PriorModel, EnumerationSumsToOne) {
  std::mt19937_64 rng(21);
  for (std::size_t rows : {1, 2}) {
    const auto g = make_geometry(5 * rows, 5, 5);
    const std::size_t steps = g.T;
    PriorModel<double> model(small_config(g, 2), 30 + rows);
    const auto bank = random_bank(5, 2, rng);
    // Per step: skip (z_id unused) at each location, or draw one of two parts.
    std::vector<LatentToken> options;
    for (std::uint32_t loc = 1; loc <= steps; ++loc) {
      options.push_back({loc, 1, false});
      for (std::uint32_t id = 1; id <= 2; ++id) options.push_back({loc, id, true});
    }
    double total = 0;
    std::size_t count = 1;
    for (std::size_t s = 0; s < steps; ++s) count *= options.size();
    for (std::size_t code = 0; code < count; ++code) {
      LatentProgram p;
      std::size_t c = code;
      for (std::size_t s = 0; s < steps; ++s, c /= options.size()) p.tokens.push_back(options[c % options.size()]);
      total += std::exp(prior_logprob(model, p, bank, g));
    }
    EXPECT_NEAR(total, 1.0, 1e-6) << "T=" << steps;
  }
}

TEST(PriorModel, MemorizesASingleProgramAndReplaysItAtZeroTemperature) {
  const auto g = make_geometry(10, 10, 5);
  std::mt19937_64 rng(17);
  const auto bank = random_bank(5, 3, rng);
  const LatentProgram p{{{2, 3, true}, {1, 1, false}, {4, 2, true}, {3, 1, true}}};
  PriorModel<float> model(small_config(g, 3), 3);
  PretrainConfig cfg;
  cfg.epochs = 3000;
  cfg.batch = 1;
  cfg.lr = 3e-3;
  cfg.max_steps = 600;
  const auto res = pretrain_prior(model, {p}, bank, g, cfg);
  EXPECT_LT(prior_nll(model, {p}, bank, g), 0.01);
  EXPECT_GT(prior_logprob(model, p, bank, g), -0.01);
  EXPECT_EQ(res.history.back().steps, 600u);
  std::mt19937_64 s1(1), s2(99);
  EXPECT_TRUE(drawn_only(sample_prior(model, bank, g, s1, 0.0).program) == p);
  EXPECT_TRUE(drawn_only(sample_prior(model, bank, g, s2, 0.0).program) == p);
  const auto replay = sample_prior(model, bank, g, s1, 0.0);
  EXPECT_EQ(replay.canvas.pixels, render_program(p, bank, g).pixels);
}

TEST(PriorModel, SamplingIsSeededAndInRange) {
  const auto g = make_geometry(15, 15, 5);
  PriorModel<float> model(small_config(g, 5), 4);
  std::mt19937_64 rng(19);
  const auto bank = random_bank(5, 5, rng);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 a(seed), b(seed);
    const auto pa = sample_prior(model, bank, g, a, 1.0);
    EXPECT_EQ(pa.program, sample_prior(model, bank, g, b, 1.0).program);
    ASSERT_EQ(pa.program.tokens.size(), 9u);
    for (const auto& t : pa.program.tokens) {
      EXPECT_GE(t.z_loc, 1u);
      EXPECT_LE(t.z_loc, 9u);
      EXPECT_GE(t.z_id, 1u);
      EXPECT_LE(t.z_id, 5u);
    }
    EXPECT_EQ(pa.canvas.pixels, render_program(pa.program, bank, g).pixels);
  }
  std::mt19937_64 r(0);
  EXPECT_THROW(sample_prior(model, bank, g, r, -1.0), std::invalid_argument);
}

TEST(PriorPretrain, EmptyCorpusThrows) {
  const auto g = make_geometry(10, 10, 5);
  PriorModel<float> model(small_config(g, 3), 3);
  std::mt19937_64 rng(1);
  EXPECT_THROW(pretrain_prior(model, {}, random_bank(5, 3, rng), g, PretrainConfig{}), std::invalid_argument);
}

TEST(PriorPretrain, KeepsTheBestValidationCheckpoint) {
  const auto g = make_geometry(10, 10, 5);
  std::mt19937_64 rng(23);
  const auto bank = random_bank(5, 3, rng);
  std::vector<LatentProgram> corpus;
  for (int i = 0; i < 20; ++i) corpus.push_back(random_program(4, 3, rng));
  PriorModel<float> model(small_config(g, 3), 8);
  PretrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch = 8;
  cfg.lr = 1e-2;
  const auto res = pretrain_prior(model, corpus, bank, g, cfg);
  ASSERT_EQ(res.history.size(), 6u);
  double best = 1e300;
  for (const auto& r : res.history) best = std::min(best, r.val_nll);
  EXPECT_DOUBLE_EQ(res.best_loss, best);
  // The 10% validation split is two programs; recompute their loss on the restored parameters.
  std::vector<std::size_t> order(20);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split(cfg.seed);
  std::shuffle(order.begin(), order.end(), split);
  EXPECT_NEAR(prior_nll(model, {corpus[order[0]], corpus[order[1]]}, bank, g), best, 1e-4);
}
