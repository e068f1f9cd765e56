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
#include "npdraw/canvas.hpp"
#include "npdraw/nn.hpp"

namespace npdraw {

struct PriorConfig {
  std::size_t layers = 8;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ff = 256;  // Transformer MLP width
  double dropout = 0.1;
  std::size_t cnn_hidden = 16;
  std::size_t head_hidden = 64;
  // Problem shape: steps T, bank size M, canvas channels and padded extent.
  std::size_t steps = 0, bank_size = 0, channels = 1, height = 0, width = 0, patch_size = 0;

  static PriorConfig for_geometry(const GridGeometry& geom, std::size_t bank_size, std::size_t channels);
  /// Throws std::invalid_argument on inconsistent fields.
  void validate() const;
  nlohmann::json to_json() const;
  static PriorConfig from_json(const nlohmann::json& j);
};

/// One-hot (or relaxed) token tensors for a batch: id B x S x M, loc B x S x T, is B x S.
template <class T>
struct TokenTensors {
  ad::Tensor<T> id, loc, is;
};

template <class T>
TokenTensors<T> one_hot_tokens(const std::vector<LatentProgram>& programs, std::size_t bank_size, std::size_t steps);

/// Frame sequence for the prior: [start frame, c^1 | m^1, ..., c^{t-1} | m^{t-1}] as a
/// t x (C + 1) x H x W tensor, where m^i is the K x K region drawn at step i
/// (all zero when step i skipped). loc_history[i] is 0 for a skipped step.
/// canvas_history holds c^1..c^{t-1}; both histories have t - 1 entries.
template <class T>
ad::Tensor<T> prior_step_inputs(const std::vector<Canvas>& canvas_history, const std::vector<std::size_t>& loc_history,
                                const GridGeometry& geom, std::size_t channels);

/// Teacher-forcing frames for whole programs: B x T x (C + 1) x H x W.
template <class T>
ad::Tensor<T> program_frames(const std::vector<LatentProgram>& programs, const PartBank& bank, const GridGeometry& geom);

/// Per-step log-probabilities from the three heads.
template <class T>
struct StepConditionals {
  ad::Tensor<T> log_p_id;   // B x S x M
  ad::Tensor<T> log_p_loc;  // B x S x T
  ad::Tensor<T> logit_is;   // B x S
};

/// log p of each step's token: B x S. The z_id term counts only where is = 1.
template <class T>
ad::Tensor<T> step_logprob(const StepConditionals<T>& out, const TokenTensors<T>& tokens);

template <class T>
class PriorModel {
 public:
  PriorModel() = default;
  PriorModel(const PriorConfig& config, std::uint64_t seed);

  /// frames: B x S x (C + 1) x H x W with S <= T. Output position s conditions on frames 0..s.
  StepConditionals<T> forward(const ad::Tensor<T>& frames, bool training, std::mt19937_64& rng) const;
  StepConditionals<T> forward(const ad::Tensor<T>& frames) const;

  const PriorConfig& config() const { return config_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }

 private:
  PriorConfig config_;
  ad::ParameterSet<T> params_;
  ad::Conv2d<T> conv1_, conv2_;
  ad::Linear<T> embed_;
  std::vector<ad::TransformerBlock<T>> blocks_;
  ad::LayerNorm<T> final_norm_;
  ad::MlpHead<T> id_head_, loc_head_, is_head_;
  ad::Tensor<T> positions_;
};

/// Exact log p(program); the z_id factor is included only on drawing steps.
template <class T>
double prior_logprob(const PriorModel<T>& model, const LatentProgram& program, const PartBank& bank,
                     const GridGeometry& geom);

struct PriorSample {
  LatentProgram program;
  Canvas canvas;
};

/// Ancestral sampling with temperature-scaled logits; temperature 0 takes the argmax.
template <class T>
PriorSample sample_prior(const PriorModel<T>& model, const PartBank& bank, const GridGeometry& geom,
                         std::mt19937_64& rng, double temperature = 1.0);

struct PretrainConfig {
  std::size_t epochs = 200;
  std::size_t batch = 64;
  double lr = 1e-4;
  double val_fraction = 0.1;
  std::size_t max_steps = 0;  // 0 = no limit
  std::uint64_t seed = 0;
};

struct PretrainRecord {
  std::size_t epoch = 0, steps = 0;
  double train_nll = 0, val_nll = 0;  // total NLL per program
};

struct PretrainResult {
  std::vector<PretrainRecord> history;
  std::size_t best_epoch = 0;
  double best_loss = 0;
};

/// Mean total teacher-forced NLL per program over `programs` (eval mode).
template <class T>
double prior_nll(const PriorModel<T>& model, const std::vector<LatentProgram>& programs, const PartBank& bank,
                 const GridGeometry& geom, std::size_t batch = 64);

/// Adam on the teacher-forced NLL. Keeps the parameters with the lowest
/// validation loss (training loss when the validation split is empty).
template <class T>
PretrainResult pretrain_prior(PriorModel<T>& model, const std::vector<LatentProgram>& programs, const PartBank& bank,
                              const GridGeometry& geom, const PretrainConfig& config,
                              const std::function<void(const PretrainRecord&)>& on_epoch = {});

}  // namespace npdraw
