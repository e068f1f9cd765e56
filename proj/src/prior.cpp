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

#include "npdraw/prior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "npdraw/adam.hpp"

namespace npdraw {

using ad::Tensor;

PriorConfig PriorConfig::for_geometry(const GridGeometry& geom, std::size_t bank_size, std::size_t channels) {
  PriorConfig c;
  c.steps = geom.T;
  c.bank_size = bank_size;
  c.channels = channels;
  c.height = geom.padded_h();
  c.width = geom.padded_w();
  c.patch_size = geom.patch_size;
  return c;
}

void PriorConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("prior config: " + what); };
  if (heads == 0 || hidden % heads != 0) fail("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  if (layers == 0 || ff == 0 || cnn_hidden == 0 || head_hidden == 0) fail("layer sizes must be positive");
  if (steps == 0 || bank_size == 0 || channels == 0) fail("steps, bank size and channels must be positive");
  if (patch_size == 0 || height % patch_size || width % patch_size || (height / patch_size) * (width / patch_size) != steps)
    fail("grid " + std::to_string(height) + "x" + std::to_string(width) + "/K=" + std::to_string(patch_size) +
         " does not give T=" + std::to_string(steps));
  if (dropout < 0.0 || dropout >= 1.0) fail("dropout must be in [0, 1)");
}

nlohmann::json PriorConfig::to_json() const {
  return {{"layers", layers},     {"hidden", hidden}, {"heads", heads},           {"ff", ff},
          {"dropout", dropout},   {"cnn_hidden", cnn_hidden}, {"head_hidden", head_hidden},
          {"steps", steps},       {"bank_size", bank_size},   {"channels", channels},
          {"height", height},     {"width", width},           {"patch_size", patch_size}};
}

PriorConfig PriorConfig::from_json(const nlohmann::json& j) {
  PriorConfig c;
  c.layers = j.at("layers");
  c.hidden = j.at("hidden");
  c.heads = j.at("heads");
  c.ff = j.at("ff");
  c.dropout = j.at("dropout");
  c.cnn_hidden = j.at("cnn_hidden");
  c.head_hidden = j.at("head_hidden");
  c.steps = j.at("steps");
  c.bank_size = j.at("bank_size");
  c.channels = j.at("channels");
  c.height = j.at("height");
  c.width = j.at("width");
  c.patch_size = j.at("patch_size");
  c.validate();
  return c;
}

template <class T>
TokenTensors<T> one_hot_tokens(const std::vector<LatentProgram>& programs, std::size_t bank_size, std::size_t steps) {
  const std::size_t b = programs.size();
  std::vector<T> id(b * steps * bank_size, T(0)), loc(b * steps * steps, T(0)), is(b * steps, T(0));
  for (std::size_t i = 0; i < b; ++i) {
    const auto& tok = programs[i].tokens;
    if (tok.size() != steps) {
      throw std::invalid_argument("program has " + std::to_string(tok.size()) + " tokens, expected " + std::to_string(steps));
    }
    for (std::size_t s = 0; s < steps; ++s) {
      if (tok[s].z_id < 1 || tok[s].z_id > bank_size || tok[s].z_loc < 1 || tok[s].z_loc > steps)
        throw std::out_of_range("token index out of range at step " + std::to_string(s + 1));
      const std::size_t row = i * steps + s;
      id[row * bank_size + tok[s].z_id - 1] = T(1);
      loc[row * steps + tok[s].z_loc - 1] = T(1);
      is[row] = tok[s].z_is ? T(1) : T(0);
    }
  }
  return {Tensor<T>::from({b, steps, bank_size}, std::move(id)), Tensor<T>::from({b, steps, steps}, std::move(loc)),
          Tensor<T>::from({b, steps}, std::move(is))};
}

template <class T>
Tensor<T> prior_step_inputs(const std::vector<Canvas>& canvas_history, const std::vector<std::size_t>& loc_history,
                            const GridGeometry& geom, std::size_t channels) {
  if (canvas_history.size() != loc_history.size()) {
    throw std::invalid_argument("prior_step_inputs: " + std::to_string(canvas_history.size()) + " canvases but " +
                                std::to_string(loc_history.size()) + " locations");
  }
  const std::size_t h = geom.padded_h(), w = geom.padded_w(), hw = h * w, cf = channels + 1;
  const std::size_t t = canvas_history.size() + 1, k = geom.patch_size;
  std::vector<T> v(t * cf * hw, T(0));
  for (std::size_t i = 1; i < t; ++i) {
    const Canvas& c = canvas_history[i - 1];
    if (c.height != h || c.width != w || c.channels != channels)
      throw std::invalid_argument("prior_step_inputs: canvas does not match the geometry");
    T* frame = v.data() + i * cf * hw;
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t ch = 0; ch < channels; ++ch) frame[ch * hw + p] = static_cast<T>(c.pixels[p * channels + ch]);
    if (const std::size_t loc = loc_history[i - 1]; loc != 0) {
      const auto [r0, c0] = geom.cell_origin(loc);
      T* mask = frame + channels * hw;
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) mask[(r0 + y) * w + c0 + x] = T(1);
    }
  }
  return Tensor<T>::from({t, cf, h, w}, std::move(v));
}

template <class T>
Tensor<T> program_frames(const std::vector<LatentProgram>& programs, const PartBank& bank, const GridGeometry& geom) {
  const std::size_t cf = bank.channels + 1, hw = geom.padded_h() * geom.padded_w();
  std::vector<T> all;
  all.reserve(programs.size() * geom.T * cf * hw);
  for (const auto& prog : programs) {
    auto hist = render_history(prog, bank, geom);  // c^0..c^T
    std::vector<Canvas> canvases(hist.begin() + 1, hist.end() - 1);
    std::vector<std::size_t> locs;
    for (std::size_t s = 0; s + 1 < geom.T; ++s) locs.push_back(prog.tokens[s].z_is ? prog.tokens[s].z_loc : 0);
    const auto f = prior_step_inputs<T>(canvases, locs, geom, bank.channels);
    all.insert(all.end(), f.values().begin(), f.values().end());
  }
  return Tensor<T>::from({programs.size(), geom.T, cf, geom.padded_h(), geom.padded_w()}, std::move(all));
}

template <class T>
Tensor<T> step_logprob(const StepConditionals<T>& out, const TokenTensors<T>& tokens) {
  using namespace ad;
  const Tensor<T> lid = sum(mul(tokens.id, out.log_p_id), -1);
  const Tensor<T> lloc = sum(mul(tokens.loc, out.log_p_loc), -1);
  const Tensor<T> not_is = add_scalar(neg(tokens.is), T(1));
  const Tensor<T> lis = add(mul(tokens.is, log_sigmoid(out.logit_is)), mul(not_is, log_sigmoid(neg(out.logit_is))));
  return add(add(lloc, lis), mul(tokens.is, lid));
}

template <class T>
PriorModel<T>::PriorModel(const PriorConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const auto& c = config_;
  conv1_ = ad::Conv2d<T>(params_, "prior.cnn1", c.channels + 1, c.cnn_hidden, 3, 1, 1, rng);
  conv2_ = ad::Conv2d<T>(params_, "prior.cnn2", c.cnn_hidden, c.cnn_hidden, 3, 1, 1, rng);
  embed_ = ad::Linear<T>(params_, "prior.embed", c.cnn_hidden, c.hidden, rng);
  for (std::size_t i = 0; i < c.layers; ++i)
    blocks_.emplace_back(params_, "prior.block" + std::to_string(i), c.hidden, c.heads, c.ff, c.dropout, rng);
  final_norm_ = ad::LayerNorm<T>(params_, "prior.norm", c.hidden);
  id_head_ = ad::MlpHead<T>(params_, "prior.head_id", c.hidden, c.head_hidden, c.bank_size, rng);
  loc_head_ = ad::MlpHead<T>(params_, "prior.head_loc", c.hidden, c.head_hidden, c.steps, rng);
  is_head_ = ad::MlpHead<T>(params_, "prior.head_is", c.hidden, c.head_hidden, 1, rng);
  positions_ = ad::sinusoidal_positions<T>(c.steps, c.hidden);
}

template <class T>
StepConditionals<T> PriorModel<T>::forward(const Tensor<T>& frames, bool training, std::mt19937_64& rng) const {
  using namespace ad;
  const auto& c = config_;
  if (frames.rank() != 5 || frames.dim(2) != c.channels + 1 || frames.dim(3) != c.height || frames.dim(4) != c.width ||
      frames.dim(1) == 0 || frames.dim(1) > c.steps) {
    throw ShapeError("prior forward: frames " + shape_str(frames.shape()) + " do not fit (B, S<=" +
                     std::to_string(c.steps) + ", " + std::to_string(c.channels + 1) + ", " + std::to_string(c.height) +
                     ", " + std::to_string(c.width) + ")");
  }
  const std::size_t b = frames.dim(0), s = frames.dim(1);
  Tensor<T> x = reshape(frames, {b * s, c.channels + 1, c.height, c.width});
  // Mean-pooling commutes with the linear second layer, so pool before applying it.
  x = conv2_.pooled(relu(conv1_(x)));
  x = reshape(embed_(x), {b, s, c.hidden});
  x = add(x, slice(positions_, 0, 0, s));
  const Tensor<T> mask = causal_mask<T>(s);
  for (const auto& block : blocks_) x = block(x, mask, training, rng);
  x = final_norm_(x);
  return {log_softmax(id_head_(x), -1), log_softmax(loc_head_(x), -1), reshape(is_head_(x), {b, s})};
}

template <class T>
StepConditionals<T> PriorModel<T>::forward(const Tensor<T>& frames) const {
  std::mt19937_64 unused(0);
  return forward(frames, false, unused);
}

template <class T>
double prior_logprob(const PriorModel<T>& model, const LatentProgram& program, const PartBank& bank,
                     const GridGeometry& geom) {
  ad::NoGradGuard guard;
  const auto out = model.forward(program_frames<T>({program}, bank, geom));
  const auto lp = step_logprob(out, one_hot_tokens<T>({program}, bank.size(), geom.T));
  double total = 0;
  for (T v : lp.values()) total += static_cast<double>(v);
  return total;
}

namespace {

// Index drawn from softmax(logits / temperature); argmax when temperature is 0.
template <class T>
std::size_t sample_categorical(const T* logits, std::size_t n, double temperature, std::mt19937_64& rng) {
  if (temperature == 0.0) return static_cast<std::size_t>(std::max_element(logits, logits + n) - logits);
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) top = std::max(top, static_cast<double>(logits[i]) / temperature);
  std::vector<double> w(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += w[i] = std::exp(static_cast<double>(logits[i]) / temperature - top);
  double u = std::uniform_real_distribution<double>(0.0, total)(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (u < w[i]) return i;
    u -= w[i];
  }
  return n - 1;
}

}  // namespace

template <class T>
PriorSample sample_prior(const PriorModel<T>& model, const PartBank& bank, const GridGeometry& geom,
                         std::mt19937_64& rng, double temperature) {
  if (!(temperature >= 0.0) || !std::isfinite(temperature))
    throw std::invalid_argument("sampling temperature must be finite and >= 0");
  ad::NoGradGuard guard;
  const std::size_t m = bank.size(), steps = geom.T;
  PriorSample out;
  out.canvas = empty_canvas(geom, bank.channels);
  std::vector<Canvas> canvases;
  std::vector<std::size_t> locs;
  for (std::size_t t = 0; t < steps; ++t) {
    auto frames = prior_step_inputs<T>(canvases, locs, geom, bank.channels);
    ad::Shape shape = frames.shape();
    shape.insert(shape.begin(), 1);
    const auto cond = model.forward(ad::reshape(frames, shape));
    LatentToken tok;
    const double logit = static_cast<double>(cond.logit_is.values()[t]);
    if (temperature == 0.0) {
      tok.z_is = logit > 0.0;
    } else {
      const double p = 1.0 / (1.0 + std::exp(-logit / temperature));
      tok.z_is = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p;
    }
    tok.z_loc = static_cast<std::uint32_t>(
        sample_categorical(cond.log_p_loc.values().data() + t * steps, steps, temperature, rng) + 1);
    tok.z_id = static_cast<std::uint32_t>(sample_categorical(cond.log_p_id.values().data() + t * m, m, temperature, rng) + 1);
    out.canvas = update_canvas(out.canvas, tok, bank, geom);
    out.program.tokens.push_back(tok);
    canvases.push_back(out.canvas);
    locs.push_back(tok.z_is ? tok.z_loc : 0);
  }
  return out;
}

namespace {

template <class T>
Tensor<T> batch_nll(const PriorModel<T>& model, const std::vector<LatentProgram>& batch, const PartBank& bank,
                    const GridGeometry& geom, bool training, std::mt19937_64& rng) {
  const auto out = model.forward(program_frames<T>(batch, bank, geom), training, rng);
  const auto lp = step_logprob(out, one_hot_tokens<T>(batch, bank.size(), geom.T));
  return ad::neg(ad::mean(ad::sum(lp, 1)));
}

std::vector<LatentProgram> gather(const std::vector<LatentProgram>& programs, const std::vector<std::size_t>& idx,
                                  std::size_t begin, std::size_t end) {
  std::vector<LatentProgram> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(programs[idx[i]]);
  return out;
}

}  // namespace

template <class T>
double prior_nll(const PriorModel<T>& model, const std::vector<LatentProgram>& programs, const PartBank& bank,
                 const GridGeometry& geom, std::size_t batch) {
  if (programs.empty()) throw std::invalid_argument("prior_nll: no programs");
  ad::NoGradGuard guard;
  std::mt19937_64 rng(0);
  std::vector<std::size_t> idx(programs.size());
  std::iota(idx.begin(), idx.end(), 0);
  double total = 0;
  for (std::size_t b = 0; b < programs.size(); b += batch) {
    const std::size_t e = std::min(programs.size(), b + batch);
    total += static_cast<double>(batch_nll(model, gather(programs, idx, b, e), bank, geom, false, rng).item()) *
             static_cast<double>(e - b);
  }
  return total / static_cast<double>(programs.size());
}

template <class T>
PretrainResult pretrain_prior(PriorModel<T>& model, const std::vector<LatentProgram>& programs, const PartBank& bank,
                              const GridGeometry& geom, const PretrainConfig& config,
                              const std::function<void(const PretrainRecord&)>& on_epoch) {
  if (programs.empty()) throw std::invalid_argument("pretrain_prior: empty corpus");
  if (config.batch == 0) throw std::invalid_argument("pretrain_prior: batch must be positive");
  for (const auto& p : programs) validate_program(p, geom, bank.size());

  std::vector<std::size_t> order(programs.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(config.seed);
  std::shuffle(order.begin(), order.end(), split_rng);
  const auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(programs.size())));
  std::vector<LatentProgram> val(programs.size() > n_val ? n_val : 0);
  for (std::size_t i = 0; i < val.size(); ++i) val[i] = programs[order[i]];
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(val.size()), order.end());
  std::vector<LatentProgram> train_programs;
  if (val.empty())
    for (auto i : train) train_programs.push_back(programs[i]);

  auto& params = model.params().parameters();
  model.params().zero_grad();
  ad::AdamState<T> adam;
  adam.lr = config.lr;
  PretrainResult result;
  result.best_loss = std::numeric_limits<double>::infinity();
  std::vector<std::vector<T>> best;
  std::size_t steps = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::mt19937_64 rng(config.seed ^ (0x9e3779b97f4a7c15ULL * epoch));
    std::shuffle(train.begin(), train.end(), rng);
    double sum = 0;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < train.size(); b += config.batch) {
      if (config.max_steps && steps >= config.max_steps) break;
      const std::size_t e = std::min(train.size(), b + config.batch);
      const auto loss = batch_nll(model, gather(programs, train, b, e), bank, geom, true, rng);
      ad::backward(loss);
      ad::adam_step(params, adam);
      ++steps;
      sum += static_cast<double>(loss.item()) * static_cast<double>(e - b);
      seen += e - b;
    }
    if (seen == 0) break;
    PretrainRecord rec{epoch, steps, sum / static_cast<double>(seen), 0.0};
    rec.val_nll = prior_nll(model, val.empty() ? train_programs : val, bank, geom);
    result.history.push_back(rec);
    if (rec.val_nll < result.best_loss) {
      result.best_loss = rec.val_nll;
      result.best_epoch = epoch;
      best.clear();
      for (const auto& p : params) best.push_back(p.tensor.values());
    }
    if (on_epoch) on_epoch(rec);
  }
  for (std::size_t i = 0; i < best.size(); ++i) params[i].tensor.values() = best[i];
  return result;
}

#define NPDRAW_PRIOR_INSTANTIATE(T)                                                                                  \
  template TokenTensors<T> one_hot_tokens<T>(const std::vector<LatentProgram>&, std::size_t, std::size_t);           \
  template Tensor<T> prior_step_inputs<T>(const std::vector<Canvas>&, const std::vector<std::size_t>&,               \
                                          const GridGeometry&, std::size_t);                                         \
  template Tensor<T> program_frames<T>(const std::vector<LatentProgram>&, const PartBank&, const GridGeometry&);     \
  template Tensor<T> step_logprob<T>(const StepConditionals<T>&, const TokenTensors<T>&);                                 \
  template class PriorModel<T>;                                                                                      \
  template double prior_logprob<T>(const PriorModel<T>&, const LatentProgram&, const PartBank&, const GridGeometry&); \
  template PriorSample sample_prior<T>(const PriorModel<T>&, const PartBank&, const GridGeometry&, std::mt19937_64&, \
                                       double);                                                                      \
  template double prior_nll<T>(const PriorModel<T>&, const std::vector<LatentProgram>&, const PartBank&,             \
                               const GridGeometry&, std::size_t);                                                    \
  template PretrainResult pretrain_prior<T>(PriorModel<T>&, const std::vector<LatentProgram>&, const PartBank&,      \
                                            const GridGeometry&, const PretrainConfig&,                              \
                                            const std::function<void(const PretrainRecord&)>&);

NPDRAW_PRIOR_INSTANTIATE(float)
NPDRAW_PRIOR_INSTANTIATE(double)

}  // namespace npdraw
