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

#include "npdraw/pipeline.hpp"

#include <cstdio>
#include <stdexcept>

namespace npdraw {

std::vector<LatentProgram> parse_corpus(const std::vector<Image>& images, const PartBank& bank, const GridGeometry& geom,
                                        const ParseConfig& config) {
  std::vector<LatentProgram> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(parse_image(im, bank, geom, config));
  return out;
}

double mean_parse_psnr(const std::vector<Image>& images, const std::vector<LatentProgram>& programs,
                       const PartBank& bank, const GridGeometry& geom) {
  if (images.empty() || images.size() != programs.size()) throw std::invalid_argument("psnr: one program per image required");
  // PSNR of the squared error pooled over every padded pixel of every image.
  double se = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image padded = pad_image(images[i], geom);
    const Canvas c = render_program(programs[i], bank, geom);
    for (std::size_t p = 0; p < padded.pixels.size(); ++p) {
      const double d = static_cast<double>(padded.pixels[p]) - c.pixels[p];
      se += d * d;
    }
    n += padded.pixels.size();
  }
  return psnr_from_mse(se / static_cast<double>(n));
}

TestTerms eval_terms(FullModel<float>& model, const std::vector<Image>& images, std::uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("eval_terms: empty dataset");
  ad::NoGradGuard guard;
  std::mt19937_64 rng(seed);
  TestTerms t;
  for (std::size_t b = 0; b < images.size(); b += 100) {
    const std::vector<Image> chunk(images.begin() + static_cast<std::ptrdiff_t>(b),
                                   images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), b + 100)));
    const auto s = model.sample_terms(images_to_tensor<float>(chunk, model.geometry()), rng, false, true);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      t.recon -= s.recon.values()[i];
      t.kl += static_cast<double>(s.log_post.values()[i]) - s.log_prior.values()[i];
    }
  }
  t.recon /= static_cast<double>(images.size());
  t.kl /= static_cast<double>(images.size());
  return t;
}

std::string ablation_csv_header() { return "K,M,lambda,PSNR,NLL,BCE,KLD"; }

std::string ablation_csv_row(const AblationRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%g,%.4f,%.4f,%.4f,%.4f", r.K, r.M, r.lambda, r.psnr, r.nll, r.bce, r.kld);
  return buf;
}

std::vector<AblationRow> run_ablation(const std::vector<Image>& train, const std::vector<Image>& test,
                                      const AblationConfig& config,
                                      const std::function<void(const AblationRow&)>& on_row) {
  if (train.empty() || test.empty()) throw std::invalid_argument("ablate: train and test sets must be non-empty");
  const std::size_t h = train[0].height, w = train[0].width, c = train[0].channels;
  std::vector<AblationRow> rows;
  for (std::size_t k : config.patch_sizes)
    for (std::size_t m : config.bank_sizes) {
      const GridGeometry geom = make_geometry(h, w, k);
      BankBuildConfig bc = config.bank;
      bc.patch_size = k;
      bc.bank_size = m;
      bc.seed = config.seed;
      const PartBank bank = build_bank(train, bc);
      const auto train_programs = parse_corpus(train, bank, geom, config.parse);
      const auto test_programs = parse_corpus(test, bank, geom, config.parse);
      const double psnr = mean_parse_psnr(test, test_programs, bank, geom);

      PriorConfig pc = PriorConfig::for_geometry(geom, bank.size(), c);
      pc.layers = config.prior.layers;
      pc.hidden = config.prior.hidden;
      pc.heads = config.prior.heads;
      pc.ff = config.prior.ff;
      pc.dropout = config.prior.dropout;
      pc.cnn_hidden = config.prior.cnn_hidden;
      pc.head_hidden = config.prior.head_hidden;
      PriorModel<float> prior(pc, config.seed + 1);
      PretrainConfig pre = config.pretrain;
      pre.seed = config.seed + 2;
      pretrain_prior(prior, train_programs, bank, geom, pre);

      for (double lambda : config.lambdas) {
        VaeConfig vc = config.vae;
        vc.lambda_reg = lambda;
        FullModel<float> model(vc, bank, geom, prior, config.seed + 3);
        TrainConfig tc = config.train;
        tc.seed = config.seed + 4;
        TrainState state;
        train_full(model, train, train_programs, tc, state);
        const auto iwae = eval_nll_iwae(model, test, config.iwae_k, config.seed + 5);
        const auto terms = eval_terms(model, test, config.seed + 6);
        AblationRow row{k, bank.size(), lambda, psnr, iwae.nll, terms.recon, terms.kl};
        rows.push_back(row);
        if (on_row) on_row(row);
      }
    }
  return rows;
}

}  // namespace npdraw
