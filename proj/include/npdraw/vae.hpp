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

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>
#include "npdraw/adam.hpp"
#include "npdraw/canvas.hpp"
#include "npdraw/prior.hpp"

namespace npdraw {

enum class OutputDist { Bernoulli, LogisticMixture };

std::string to_string(OutputDist d);
OutputDist output_dist_from_string(const std::string& s);

struct VaeConfig {
  std::size_t hidden = 128;
  std::size_t head_hidden = 128;
  double lambda_reg = 50.0;
  OutputDist output = OutputDist::Bernoulli;
  int mixtures = 5;
  double temperature = 1.0;
  bool hard = true;  // straight-through samples during training

  void validate() const;
  nlohmann::json to_json() const;
  static VaeConfig from_json(const nlohmann::json& j);
};

/// B x C x H x W tensor of images zero-padded to the geometry.
template <class T>
ad::Tensor<T> images_to_tensor(const std::vector<Image>& images, const GridGeometry& geom);
template <class T>
ad::Tensor<T> canvases_to_tensor(const std::vector<Canvas>& canvases);

/// Per-image values of one Monte-Carlo draw.
template <class T>
struct SampleTerms {
  TokenTensors<T> tokens;
  ad::Tensor<T> recon;     // [B] log p(x | z)
  ad::Tensor<T> log_prior; // [B] log p(z)
  ad::Tensor<T> log_post;  // [B] log q(z | x)
};

template <class T>
struct LossTerms {
  ad::Tensor<T> loss;  // -(ELBO + lambda * L_reg), batch mean
  double elbo = 0, recon = 0, kl = 0, reg = 0;  // batch means
};

/// Encoder q(z|x), canvas decoder p(x|z), the frozen prior and the part bank.
template <class T>
class FullModel {
 public:
  FullModel() = default;
  /// The prior's parameters are copied and frozen.
  FullModel(const VaeConfig& config, const PartBank& bank, const GridGeometry& geom, const PriorModel<T>& prior,
            std::uint64_t seed);

  /// x: B x C x H x W padded. Returns logits per step as conditionals.
  StepConditionals<T> encode(const ad::Tensor<T>& x, bool training);
  /// canvas: B x C x H x W. Bernoulli logits (C channels) or mixture parameters.
  ad::Tensor<T> decode(const ad::Tensor<T>& canvas, bool training);

  /// Differentiable rendering of (possibly relaxed) tokens.
  struct Rendered {
    ad::Tensor<T> canvas;  // B x C x H x W, c^T
    ad::Tensor<T> frames;  // B x T x (C + 1) x H x W, prior inputs
  };
  Rendered render(const TokenTensors<T>& tokens) const;

  /// [B] log p(z) under the frozen prior, with gradient to the tokens.
  ad::Tensor<T> prior_log_prob(const TokenTensors<T>& tokens, const Rendered& r) const;
  /// [B] log p(x | canvas).
  ad::Tensor<T> log_likelihood(const ad::Tensor<T>& x, const ad::Tensor<T>& canvas, bool training);

  /// Draws z ~ q(z | x) once and evaluates the three log terms.
  SampleTerms<T> sample_terms(const ad::Tensor<T>& x, std::mt19937_64& rng, bool training, bool hard);
  SampleTerms<T> sample_terms(const StepConditionals<T>& q, const ad::Tensor<T>& x, std::mt19937_64& rng,
                              bool training, bool hard);

  /// Single-sample loss; `parsed` holds the heuristic parse steering q.
  LossTerms<T> loss(const ad::Tensor<T>& x, const TokenTensors<T>& parsed, std::mt19937_64& rng, bool training);

  /// Argmax program of q(z | x) for one padded image.
  LatentProgram encode_argmax(const Image& image);
  /// Decoder mean image for a canvas (no grad, eval mode).
  Image decode_mean(const Canvas& canvas);

  const VaeConfig& config() const { return config_; }
  VaeConfig& config() { return config_; }
  const PartBank& bank() const { return bank_; }
  const GridGeometry& geometry() const { return geom_; }
  const PriorModel<T>& prior() const { return prior_; }
  PriorModel<T>& prior() { return prior_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }
  std::size_t decoder_channels() const;

 private:
  struct ConvBn {
    ad::Conv2d<T> conv;
    ad::BatchNorm<T> bn;
  };
  VaeConfig config_;
  PartBank bank_;
  GridGeometry geom_;
  PriorModel<T> prior_;
  ad::ParameterSet<T> params_;
  ad::Tensor<T> bank_matrix_;  // M x (K * K * C)
  ad::Tensor<T> step_codes_;   // T x T identity
  std::vector<ConvBn> enc_;
  ad::MlpHead<T> q_id_, q_loc_, q_is_;
  ConvBn down1_, down2_;
  std::vector<ConvBn> res_;  // pairs per block
  ad::ConvTranspose2d<T> up1_, up2_;
  ad::BatchNorm<T> up1_bn_;
};

/// Gumbel-softmax samples for z_id and z_loc, binary concrete for z_is.
template <class T>
TokenTensors<T> sample_posterior(const StepConditionals<T>& q, double temperature, bool hard, std::mt19937_64& rng);

/// Discrete programs from hard token tensors (argmax per step).
template <class T>
std::vector<LatentProgram> tokens_to_programs(const TokenTensors<T>& tokens);

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0, neg_elbo = 0, recon = 0, kl = 0, reg = 0;  // training means
  double val_loss = 0;
  double seconds = 0;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 150;
  double lr = 1e-3;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
};

/// Everything needed to continue training exactly where it stopped.
struct TrainState {
  std::size_t epoch = 0;  // epochs completed
  ad::AdamState<float> adam;
  std::vector<EpochRecord> history;
  double best_val = 0;
  std::size_t best_epoch = 0;
  std::vector<std::vector<float>> best;  // parameter and buffer values at best_epoch
};

/// Adam on loss(); validation (seeded split of `images`) picks the best epoch.
/// Resumes from `state.epoch`. `on_epoch` returning false stops early; the
/// best parameters are restored only when all epochs complete.
void train_full(FullModel<float>& model, const std::vector<Image>& images, const std::vector<LatentProgram>& parsed,
                const TrainConfig& config, TrainState& state,
                const std::function<bool(const EpochRecord&, const TrainState&)>& on_epoch = {});

/// Fraction of steps whose posterior argmax (z_is, and z_id when drawing) matches the parse.
double parse_agreement(FullModel<float>& model, const std::vector<Image>& images, const std::vector<LatentProgram>& parsed);

struct IwaeResult {
  double mean_bound = 0;    // nats per image
  double std_error = 0;
  double nll = 0;           // nats (gray) or bits/dim (color)
  std::vector<double> bounds;
};

/// Importance-weighted bound with k hard posterior samples per image (eval mode).
IwaeResult eval_nll_iwae(FullModel<float>& model, const std::vector<Image>& images, std::size_t k, std::uint64_t seed);

}  // namespace npdraw
