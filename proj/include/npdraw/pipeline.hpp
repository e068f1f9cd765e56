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

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "npdraw/part_bank.hpp"
#include "npdraw/parser.hpp"
#include "npdraw/prior.hpp"
#include "npdraw/vae.hpp"

namespace npdraw {

std::vector<LatentProgram> parse_corpus(const std::vector<Image>& images, const PartBank& bank, const GridGeometry& geom,
                                        const ParseConfig& config = {});

double mean_parse_psnr(const std::vector<Image>& images, const std::vector<LatentProgram>& programs,
                       const PartBank& bank, const GridGeometry& geom);

/// Single-sample test-set means: negative recon ("BCE") and KL, nats per image.
struct TestTerms {
  double recon = 0, kl = 0;
};
TestTerms eval_terms(FullModel<float>& model, const std::vector<Image>& images, std::uint64_t seed);

struct AblationConfig {
  std::vector<std::size_t> patch_sizes{5, 8};
  std::vector<std::size_t> bank_sizes{10, 50};
  std::vector<double> lambdas{0, 50};
  BankBuildConfig bank;      // patch_size and bank_size overridden per row
  ParseConfig parse;
  PriorConfig prior;         // architecture only; problem shape set per row
  PretrainConfig pretrain;
  VaeConfig vae;             // lambda_reg overridden per row
  TrainConfig train;
  std::size_t iwae_k = 50;
  std::uint64_t seed = 0;
};

struct AblationRow {
  std::size_t K = 0, M = 0;
  double lambda = 0;
  double psnr = 0;  // mean parse PSNR on the test images, dB
  double nll = 0;   // IWAE, nats (gray) or bits/dim (color)
  double bce = 0;   // -log p(x | z), nats per image
  double kld = 0;   // single-sample KL, nats per image
};

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

/// One row per (K, M, lambda). The bank and prior are built once per (K, M).
std::vector<AblationRow> run_ablation(const std::vector<Image>& train, const std::vector<Image>& test,
                                      const AblationConfig& config,
                                      const std::function<void(const AblationRow&)>& on_row = {});

}  // namespace npdraw
