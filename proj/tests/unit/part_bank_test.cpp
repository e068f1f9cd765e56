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
#include <functional>
#include <random>

#include "npdraw/glyphs.hpp"
#include "npdraw/part_bank.hpp"
#include "npdraw/parser.hpp"
#include "temp_dir.hpp"

using namespace npdraw;
using npdraw::testing::TempDir;

namespace {

// Exhaustive optimum over all medoid subsets of size m.
double brute_force_cost(const std::vector<std::vector<float>>& pts, std::size_t m,
                        const std::function<double(const std::vector<float>&, const std::vector<float>&)>& dist) {
  const std::size_t n = pts.size();
  double best = INFINITY;
  std::vector<std::size_t> pick(m);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t depth, std::size_t start) {
    if (depth == m) {
      double c = 0;
      for (const auto& p : pts) {
        double d = INFINITY;
        for (std::size_t j : pick) d = std::min(d, dist(p, pts[j]));
        c += d;
      }
      best = std::min(best, c);
      return;
    }
    for (std::size_t i = start; i < n; ++i) {
      pick[depth] = i;
      rec(depth + 1, i + 1);
    }
  };
  rec(0, 0);
  return best;
}

std::vector<Image> constant_images(std::size_t n, float v) {
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image im = Image::zeros(28, 28);
    std::fill(im.pixels.begin(), im.pixels.end(), v);
    out.push_back(im);
  }
  return out;
}

}  // namespace

TEST(SamplePatches, BoundsAndCount) {
  std::mt19937_64 rng(1);
  std::vector<Image> imgs{Image::zeros(28, 28)};
  auto ps = sample_patches(imgs, 5, 10, 1000, rng);
  ASSERT_EQ(ps.size(), 10u);
  for (const auto& p : ps) {
    EXPECT_LE(p.row, 23u);
    EXPECT_LE(p.col, 23u);
    EXPECT_EQ(p.pixels.size(), 25u);
  }
}

TEST(SamplePatches, CapAndDeterminism) {
  std::vector<Image> imgs = constant_images(100, 0.2f);
  std::mt19937_64 a(5), b(5);
  auto pa = sample_patches(imgs, 5, 10, 100, a);
  auto pb = sample_patches(imgs, 5, 10, 100, b);
  EXPECT_EQ(pa.size(), 100u);
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].image, pb[i].image);
    EXPECT_EQ(pa[i].row, pb[i].row);
    EXPECT_EQ(pa[i].col, pb[i].col);
  }
}

TEST(SamplePatches, TooSmallImageThrows) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_patches({Image::zeros(4, 10)}, 5, 1, 10, rng), std::invalid_argument);
}

TEST(KMedoids, EveryPointItsOwnMedoid) {
  std::vector<std::vector<float>> pts{{0}, {1}, {3}, {7}};
  auto r = kmedoids(pts, 4);
  EXPECT_EQ(r.cost, 0.0);
  std::set<std::size_t> meds(r.medoids.begin(), r.medoids.end());
  EXPECT_EQ(meds.size(), 4u);
}

TEST(KMedoids, OneDimensionalExample) {
  std::vector<std::vector<float>> pts{{0.0f}, {0.1f}, {10.0f}, {10.1f}, {10.2f}};
  auto r = kmedoids(pts, 2);
  std::set<float> vals;
  for (auto m : r.medoids) vals.insert(pts[m][0]);
  EXPECT_TRUE(vals.count(10.1f));
  EXPECT_TRUE(vals.count(0.0f) || vals.count(0.1f));
  // Unsquared L2 cost of the returned medoids against the exhaustive optimum 0.3.
  double l2 = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) l2 += std::sqrt(squared_distance(pts[i], pts[r.medoids[r.assignment[i]]]));
  auto euclid = [](const std::vector<float>& a, const std::vector<float>& b) { return std::sqrt(squared_distance(a, b)); };
  const double opt = brute_force_cost(pts, 2, euclid);
  EXPECT_NEAR(opt, 0.3, 1e-6);
  EXPECT_LE(l2, 1.05 * opt + 1e-9);
}

TEST(KMedoids, MonotoneAndNearOptimalOnSmallPools) {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(3, 12)(rng);
    const std::size_t m = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(3, n))(rng);
    const std::size_t dim = std::uniform_int_distribution<std::size_t>(1, 4)(rng);
    std::normal_distribution<float> g(0, 1);
    std::vector<std::vector<float>> pts(n, std::vector<float>(dim));
    for (auto& p : pts)
      for (auto& v : p) v = g(rng) + (trial % 2 ? 4.0f * static_cast<float>(rng() % 3) : 0.0f);
    auto r = kmedoids(pts, m);
    for (std::size_t i = 1; i < r.cost_history.size(); ++i) EXPECT_LE(r.cost_history[i], r.cost_history[i - 1] + 1e-9);
    const double opt = brute_force_cost(pts, m, squared_distance);
    EXPECT_LE(r.cost, 1.05 * opt + 1e-9) << "trial " << trial;
    for (std::size_t i = 0; i < n; ++i) {
      // assignment is to the nearest medoid
      const double d = squared_distance(pts[i], pts[r.medoids[r.assignment[i]]]);
      for (auto med : r.medoids) EXPECT_LE(d, squared_distance(pts[i], pts[med]) + 1e-9);
    }
  }
}

TEST(KMedoids, TooFewPointsThrows) {
  EXPECT_THROW(kmedoids({{0.0f}}, 2), std::invalid_argument);
}

TEST(BuildBank, ConstantImagesGiveDuplicateMedoids) {
  BankBuildConfig cfg;
  cfg.bank_size = 4;
  try {
    build_bank(constant_images(10, 0.5f), cfg);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate medoids"), std::string::npos);
  }
}

TEST(BuildBank, FewerPatchesThanBankThrows) {
  BankBuildConfig cfg;
  cfg.bank_size = 50;
  cfg.per_image = 2;
  EXPECT_THROW(build_bank(constant_images(3, 0.5f), cfg), std::invalid_argument);
}

TEST(BuildBank, PartsAreDistinctPoolMembers) {
  GlyphCorpus corpus = gen_glyphs(default_grammar(), 200);
  BankBuildConfig cfg;
  cfg.bank_size = 20;
  cfg.seed = 3;
  PartBank bank = build_bank(corpus.dataset.images, cfg);
  ASSERT_EQ(bank.size(), 20u);
  std::mt19937_64 rng(cfg.seed);
  auto pool = sample_patches(corpus.dataset.images, 5, cfg.per_image, cfg.cap, rng);
  for (const auto& part : bank.parts) {
    bool member = false;
    for (const auto& p : pool) member = member || p.pixels == part;
    EXPECT_TRUE(member);
  }
  PartBank again = build_bank(corpus.dataset.images, cfg);
  EXPECT_EQ(again.parts, bank.parts);
}

TEST(BuildBank, AlignedNonEmptyPoolRecoversGlyphAlphabet) {
  GlyphGrammar g = default_grammar();
  GlyphCorpus corpus = gen_glyphs(g, 1000);
  BankBuildConfig cfg;
  cfg.patch_size = 5;
  cfg.bank_size = 16;
  cfg.seed = 7;
  cfg.grid_aligned = true;
  cfg.min_norm = 0.01;
  PartBank bank = build_bank(corpus.dataset.images, cfg);
  std::set<std::vector<float>> got(bank.parts.begin(), bank.parts.end());
  std::set<std::vector<float>> want(g.alphabet.begin(), g.alphabet.end());
  EXPECT_EQ(got, want);
  // and the bank's parse reproduces every image exactly
  for (std::size_t i = 0; i < 100; ++i) {
    const Image& im = corpus.dataset.images[i];
    EXPECT_EQ(parse_psnr(im, parse_image(im, bank, corpus.geom), bank, corpus.geom), 99.0);
  }
}

TEST(BankFile, RoundTripAndCorruption) {
  TempDir dir;
  PartBank bank;
  bank.patch_size = 2;
  bank.channels = 3;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  for (int m = 0; m < 5; ++m) {
    std::vector<float> p(12);
    for (auto& v : p) v = u(rng);
    bank.parts.push_back(p);
  }
  save_bank(bank, dir / "b.npbk");
  PartBank back = load_bank(dir / "b.npbk");
  EXPECT_EQ(back.parts, bank.parts);
  EXPECT_EQ(back.patch_size, 2u);
  EXPECT_EQ(back.channels, 3u);

  const std::string bytes = read_file(dir / "b.npbk");
  EXPECT_THROW(deserialize_bank(bytes.substr(0, bytes.size() - 7)), FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  try {
    deserialize_bank(magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("NPBK"), std::string::npos);
  }
  std::string flipped = bytes;
  flipped[30] ^= 0x10;
  EXPECT_THROW(deserialize_bank(flipped), FormatError);
}
