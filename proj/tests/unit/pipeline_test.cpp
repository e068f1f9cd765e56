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

#include "npdraw/glyphs.hpp"
#include "npdraw/pipeline.hpp"

using namespace npdraw;

TEST(Pipeline, ParseCorpusIsExactOnBankTiledGlyphs) {
  const auto corpus = gen_glyphs(default_grammar(7), 12);
  const auto programs = parse_corpus(corpus.dataset.images, corpus.alphabet_bank, corpus.geom);
  ASSERT_EQ(programs.size(), 12u);
  EXPECT_DOUBLE_EQ(mean_parse_psnr(corpus.dataset.images, programs, corpus.alphabet_bank, corpus.geom), 99.0);
}

TEST(Pipeline, PsnrPoolsSquaredErrorOverAllImages) {
  // Two 5x5 images against an all-zero program: errors 0.2 everywhere and 0.6 on one pixel.
  const auto geom = make_geometry(5, 5, 5);
  PartBank bank;
  bank.patch_size = 5;
  bank.parts.push_back(std::vector<float>(25, 1.0f));
  Image a = Image::zeros(5, 5), b = Image::zeros(5, 5);
  for (auto& v : a.pixels) v = 0.2f;
  b.pixels[7] = 0.6f;
  const LatentProgram skip{{{1, 1, false}}};
  const double e1 = 0.2f, e2 = 0.6f;
  const double se = 25 * e1 * e1 + e2 * e2;
  const double expected = 10 * std::log10(1.0 / (se / 50));
  EXPECT_NEAR(mean_parse_psnr({a, b}, {skip, skip}, bank, geom), expected, 1e-9);
  EXPECT_THROW(mean_parse_psnr({a, b}, {skip}, bank, geom), std::invalid_argument);
}

TEST(Pipeline, AblationCsvFormat) {
  EXPECT_EQ(ablation_csv_header(), "K,M,lambda,PSNR,NLL,BCE,KLD");
  EXPECT_EQ(ablation_csv_row({5, 50, 50, 21.123456, 90.5, 80.25, 10.125}), "5,50,50,21.1235,90.5000,80.2500,10.1250");
  EXPECT_EQ(ablation_csv_row({8, 10, 0.5, 0, 0, 0, 0}), "8,10,0.5,0.0000,0.0000,0.0000,0.0000");
}
