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

#include "npdraw/vae.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "npdraw/gumbel.hpp"

namespace npdraw {

using ad::Tensor;

std::string to_string(OutputDist d) { return d == OutputDist::Bernoulli ? "bernoulli" : "logistic_mixture"; }

OutputDist output_dist_from_string(const std::string& s) {
  if (s == "bernoulli") return OutputDist::Bernoulli;
  if (s == "logistic_mixture" || s == "mixture") return OutputDist::LogisticMixture;
  throw std::invalid_argument("unknown output distribution '" + s + "' (bernoulli | logistic_mixture)");
}

void VaeConfig::validate() const {
  if (hidden == 0 || head_hidden == 0) throw std::invalid_argument("vae config: layer sizes must be positive");
  if (!(lambda_reg >= 0.0)) throw std::invalid_argument("vae config: lambda_reg must be >= 0");
  if (mixtures < 1) throw std::invalid_argument("vae config: mixtures must be >= 1");
  if (!(temperature > 0.0)) throw std::invalid_argument("vae config: temperature must be positive");
}

nlohmann::json VaeConfig::to_json() const {
  return {{"hidden", hidden},         {"head_hidden", head_hidden}, {"lambda_reg", lambda_reg},
          {"output", to_string(output)}, {"mixtures", mixtures},     {"temperature", temperature},
          {"hard", hard}};
}

VaeConfig VaeConfig::from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.hidden = j.value("hidden", c.hidden);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
  c.output = output_dist_from_string(j.value("output", to_string(c.output)));
  c.mixtures = j.value("mixtures", c.mixtures);
  c.temperature = j.value("temperature", c.temperature);
  c.hard = j.value("hard", c.hard);
  c.validate();
  return c;
}

template <class T>
Tensor<T> images_to_tensor(const std::vector<Image>& images, const GridGeometry& geom) {
  if (images.empty()) throw std::invalid_argument("images_to_tensor: no images");
  const std::size_t c = images[0].channels, h = geom.padded_h(), w = geom.padded_w();
  std::vector<T> v(images.size() * c * h * w, T(0));
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = images[i];
    if (im.height != geom.image_h || im.width != geom.image_w || im.channels != c) {
      throw std::invalid_argument("image " + std::to_string(i) + " is " + std::to_string(im.height) + "x" +
                                  std::to_string(im.width) + "x" + std::to_string(im.channels) + ", expected " +
                                  std::to_string(geom.image_h) + "x" + std::to_string(geom.image_w) + "x" +
                                  std::to_string(c));
    }
    for (std::size_t y = 0; y < im.height; ++y)
      for (std::size_t x = 0; x < im.width; ++x)
        for (std::size_t ch = 0; ch < c; ++ch)
          v[((i * c + ch) * h + y) * w + x] = static_cast<T>(im.pixels[(y * im.width + x) * c + ch]);
  }
  return Tensor<T>::from({images.size(), c, h, w}, std::move(v));
}

template <class T>
Tensor<T> canvases_to_tensor(const std::vector<Canvas>& canvases) {
  if (canvases.empty()) throw std::invalid_argument("canvases_to_tensor: no canvases");
  const std::size_t c = canvases[0].channels, h = canvases[0].height, w = canvases[0].width;
  std::vector<T> v(canvases.size() * c * h * w);
  for (std::size_t i = 0; i < canvases.size(); ++i) {
    const Canvas& cv = canvases[i];
    if (cv.channels != c || cv.height != h || cv.width != w) throw std::invalid_argument("canvases differ in shape");
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t ch = 0; ch < c; ++ch) v[(i * c + ch) * h * w + p] = static_cast<T>(cv.pixels[p * c + ch]);
  }
  return Tensor<T>::from({canvases.size(), c, h, w}, std::move(v));
}

namespace {

template <class T>
PriorModel<T> clone_prior(const PriorModel<T>& prior) {
  PriorModel<T> copy(prior.config(), 0);
  auto& dst = copy.params().parameters();
  const auto& src = prior.params().parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i].tensor.values() = src[i].tensor.values();
  copy.params().set_trainable(false);
  return copy;
}

// N x cells x (K * K * C) cell-major layout to N x C x H x W.
template <class T>
Tensor<T> cells_to_image(const Tensor<T>& cells, const GridGeometry& g, std::size_t channels) {
  using namespace ad;
  const std::size_t n = cells.dim(0), k = g.patch_size;
  const Tensor<T> t = reshape(cells, {n, g.rows, g.cols, k, k, channels});
  return reshape(permute(t, {0, 5, 1, 3, 2, 4}), {n, channels, g.padded_h(), g.padded_w()});
}

// Sum over every axis but the first.
template <class T>
Tensor<T> per_item_sum(const Tensor<T>& x) {
  return ad::sum(ad::reshape(x, {x.dim(0), x.numel() / x.dim(0)}), 1);
}

template <class T>
double mean_of(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.values()) s += static_cast<double>(v);
  return s / static_cast<double>(std::max<std::size_t>(1, x.numel()));
}

}  // namespace

template <class T>
FullModel<T>::FullModel(const VaeConfig& config, const PartBank& bank, const GridGeometry& geom,
                        const PriorModel<T>& prior, std::uint64_t seed)
    : config_(config), bank_(bank), geom_(geom), prior_(clone_prior(prior)) {
  config_.validate();
  const auto& pc = prior.config();
  if (bank.patch_size != geom.patch_size || pc.steps != geom.T || pc.bank_size != bank.size() ||
      pc.channels != bank.channels || pc.height != geom.padded_h() || pc.width != geom.padded_w()) {
    throw std::invalid_argument("prior, bank and geometry disagree (T, M, K, channels or extent)");
  }
  std::mt19937_64 rng(seed);
  const std::size_t c = bank.channels, h = config_.hidden, steps = geom.T, m = bank.size();
  // Encoder: three stride-2 then two stride-1 3x3 convs.
  for (std::size_t i = 0; i < 5; ++i) {
    const std::string name = "encoder.conv" + std::to_string(i + 1);
    ConvBn layer{ad::Conv2d<T>(params_, name, i == 0 ? c : h, h, 3, i < 3 ? 2 : 1, 1, rng),
                 ad::BatchNorm<T>(params_, name + ".bn", h)};
    enc_.push_back(layer);
  }
  const std::size_t feat = h + steps;
  q_id_ = ad::MlpHead<T>(params_, "encoder.head_id", feat, config_.head_hidden, m, rng);
  q_loc_ = ad::MlpHead<T>(params_, "encoder.head_loc", feat, config_.head_hidden, steps, rng);
  q_is_ = ad::MlpHead<T>(params_, "encoder.head_is", feat, config_.head_hidden, 1, rng);
  // Decoder.
  down1_ = {ad::Conv2d<T>(params_, "decoder.down1", c, h, 3, 2, 1, rng), ad::BatchNorm<T>(params_, "decoder.down1.bn", h)};
  down2_ = {ad::Conv2d<T>(params_, "decoder.down2", h, h, 3, 2, 1, rng), ad::BatchNorm<T>(params_, "decoder.down2.bn", h)};
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < 2; ++j) {
      const std::string name = "decoder.res" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
      res_.push_back({ad::Conv2d<T>(params_, name, h, h, 3, 1, 1, rng), ad::BatchNorm<T>(params_, name + ".bn", h)});
    }
  up1_ = ad::ConvTranspose2d<T>(params_, "decoder.up1", h, h, 3, 2, 1, 1, rng);
  up1_bn_ = ad::BatchNorm<T>(params_, "decoder.up1.bn", h);
  up2_ = ad::ConvTranspose2d<T>(params_, "decoder.up2", h, decoder_channels(), 3, 2, 1, 1, rng);

  std::vector<T> flat;
  for (const auto& p : bank.parts) flat.insert(flat.end(), p.begin(), p.end());
  bank_matrix_ = Tensor<T>::from({m, bank.part_len()}, std::move(flat));
  std::vector<T> eye(steps * steps, T(0));
  for (std::size_t i = 0; i < steps; ++i) eye[i * steps + i] = T(1);
  step_codes_ = Tensor<T>::from({1, steps, steps}, std::move(eye));
}

template <class T>
std::size_t FullModel<T>::decoder_channels() const {
  const std::size_t c = bank_.channels;
  return config_.output == OutputDist::Bernoulli ? c : static_cast<std::size_t>(config_.mixtures) * (1 + 2 * c);
}

template <class T>
StepConditionals<T> FullModel<T>::encode(const Tensor<T>& x, bool training) {
  using namespace ad;
  if (x.rank() != 4 || x.dim(1) != bank_.channels || x.dim(2) != geom_.padded_h() || x.dim(3) != geom_.padded_w()) {
    throw ShapeError("encode: input " + shape_str(x.shape()) + " does not match the padded geometry");
  }
  const std::size_t b = x.dim(0), steps = geom_.T;
  Tensor<T> h = x;
  for (auto& layer : enc_) h = relu(layer.bn(layer.conv(h), training));
  // Split the feature map into the T grid parts; each part also sees its step index.
  h = adaptive_avg_pool2d(h, geom_.rows, geom_.cols);
  h = reshape(permute(h, {0, 2, 3, 1}), {b, steps, config_.hidden});
  h = concat<T>({h, add(Tensor<T>::zeros({b, 1, 1}), step_codes_)}, 2);
  return {log_softmax(q_id_(h), -1), log_softmax(q_loc_(h), -1), reshape(q_is_(h), {b, steps})};
}

template <class T>
Tensor<T> FullModel<T>::decode(const Tensor<T>& canvas, bool training) {
  using namespace ad;
  if (canvas.rank() != 4 || canvas.dim(1) != bank_.channels || canvas.dim(2) != geom_.padded_h() ||
      canvas.dim(3) != geom_.padded_w()) {
    throw ShapeError("decode: canvas " + shape_str(canvas.shape()) + " does not match the padded geometry");
  }
  Tensor<T> h = relu(down1_.bn(down1_.conv(canvas), training));
  h = relu(down2_.bn(down2_.conv(h), training));
  for (std::size_t b = 0; b < 2; ++b) {
    auto& c1 = res_[2 * b];
    auto& c2 = res_[2 * b + 1];
    const Tensor<T> a = relu(c1.bn(c1.conv(h), training));
    h = relu(add(h, c2.bn(c2.conv(a), training)));
  }
  h = relu(up1_bn_(up1_(h), training));
  h = up2_(h);
  return slice(slice(h, 2, 0, geom_.padded_h()), 3, 0, geom_.padded_w());
}

template <class T>
typename FullModel<T>::Rendered FullModel<T>::render(const TokenTensors<T>& tok) const {
  using namespace ad;
  const std::size_t b = tok.id.dim(0), steps = geom_.T, len = bank_.part_len(), c = bank_.channels;
  const std::size_t kk = geom_.patch_size * geom_.patch_size;
  if (tok.id.shape() != Shape{b, steps, bank_.size()} || tok.loc.shape() != Shape{b, steps, steps} ||
      tok.is.shape() != Shape{b, steps}) {
    throw ShapeError("render: token tensors do not match (B, T, M)");
  }
  const Tensor<T> parts = matmul(tok.id, bank_matrix_);  // B x T x len
  Tensor<T> canvas = Tensor<T>::zeros({b, steps, len});  // cell-major canvas
  std::vector<Tensor<T>> canvas_frames{reshape(canvas, {b, 1, steps, len})};
  std::vector<Tensor<T>> mask_frames{Tensor<T>::zeros({b, 1, steps, 1})};
  for (std::size_t t = 0; t < steps; ++t) {
    const Tensor<T> loc = reshape(slice(tok.loc, 1, t, t + 1), {b, steps, 1});
    const Tensor<T> is = reshape(slice(tok.is, 1, t, t + 1), {b, 1, 1});
    const Tensor<T> drawn = mul(loc, slice(parts, 1, t, t + 1));
    canvas = add(canvas, mul(is, sub(maximum(canvas, drawn), canvas)));
    if (t + 1 < steps) {
      canvas_frames.push_back(reshape(canvas, {b, 1, steps, len}));
      mask_frames.push_back(reshape(mul(is, loc), {b, 1, steps, 1}));
    }
  }
  Rendered r;
  r.canvas = cells_to_image(canvas, geom_, c);
  const Tensor<T> fc = cells_to_image(reshape(concat(canvas_frames, 1), {b * steps, steps, len}), geom_, c);
  const Tensor<T> masks = mul(reshape(concat(mask_frames, 1), {b * steps, steps, 1}), Tensor<T>::full({1, 1, kk}, T(1)));
  const Tensor<T> fm = cells_to_image(masks, geom_, 1);
  r.frames = reshape(concat<T>({fc, fm}, 1), {b, steps, c + 1, geom_.padded_h(), geom_.padded_w()});
  return r;
}

template <class T>
Tensor<T> FullModel<T>::prior_log_prob(const TokenTensors<T>& tokens, const Rendered& r) const {
  return ad::sum(step_logprob(prior_.forward(r.frames), tokens), 1);
}

template <class T>
Tensor<T> FullModel<T>::log_likelihood(const Tensor<T>& x, const Tensor<T>& canvas, bool training) {
  const Tensor<T> params = decode(canvas, training);
  if (config_.output == OutputDist::Bernoulli) return per_item_sum(ad::bernoulli_logprob(x, params));
  const Tensor<T> target = ad::add_scalar(ad::scale(x, T(2)), T(-1));
  return per_item_sum(ad::logistic_mixture_logprob(target, params, config_.mixtures));
}

template <class T>
TokenTensors<T> sample_posterior(const StepConditionals<T>& q, double temperature, bool hard, std::mt19937_64& rng) {
  TokenTensors<T> z;
  z.id = ad::gumbel_softmax_sample(q.log_p_id, temperature, hard, rng);
  z.loc = ad::gumbel_softmax_sample(q.log_p_loc, temperature, hard, rng);
  z.is = ad::binary_concrete_sample(q.logit_is, temperature, hard, rng);
  return z;
}

template <class T>
std::vector<LatentProgram> tokens_to_programs(const TokenTensors<T>& tokens) {
  const std::size_t b = tokens.id.dim(0), steps = tokens.id.dim(1), m = tokens.id.dim(2), cells = tokens.loc.dim(2);
  std::vector<LatentProgram> out(b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < steps; ++t) {
      const T* id = tokens.id.values().data() + (i * steps + t) * m;
      const T* loc = tokens.loc.values().data() + (i * steps + t) * cells;
      LatentToken tok;
      tok.z_id = static_cast<std::uint32_t>(std::max_element(id, id + m) - id + 1);
      tok.z_loc = static_cast<std::uint32_t>(std::max_element(loc, loc + cells) - loc + 1);
      tok.z_is = tokens.is.values()[i * steps + t] > T(0.5);
      out[i].tokens.push_back(tok);
    }
  return out;
}

template <class T>
SampleTerms<T> FullModel<T>::sample_terms(const StepConditionals<T>& q, const Tensor<T>& x, std::mt19937_64& rng,
                                          bool training, bool hard) {
  SampleTerms<T> s;
  s.tokens = sample_posterior(q, config_.temperature, hard, rng);
  const Rendered r = render(s.tokens);
  s.log_post = ad::sum(step_logprob(q, s.tokens), 1);
  s.log_prior = prior_log_prob(s.tokens, r);
  s.recon = log_likelihood(x, r.canvas, training);
  return s;
}

template <class T>
SampleTerms<T> FullModel<T>::sample_terms(const Tensor<T>& x, std::mt19937_64& rng, bool training, bool hard) {
  return sample_terms(encode(x, training), x, rng, training, hard);
}

template <class T>
LossTerms<T> FullModel<T>::loss(const Tensor<T>& x, const TokenTensors<T>& parsed, std::mt19937_64& rng,
                                bool training) {
  using namespace ad;
  const StepConditionals<T> q = encode(x, training);
  const SampleTerms<T> s = sample_terms(q, x, rng, training, config_.hard);
  const Tensor<T> kl = sub(s.log_post, s.log_prior);
  const Tensor<T> elbo = sub(s.recon, kl);
  const Tensor<T> reg = sum(step_logprob(q, parsed), 1);
  LossTerms<T> out;
  out.loss = neg(mean(add(elbo, scale(reg, static_cast<T>(config_.lambda_reg)))));
  out.elbo = mean_of(elbo);
  out.recon = mean_of(s.recon);
  out.kl = mean_of(kl);
  out.reg = mean_of(reg);
  return out;
}

template <class T>
LatentProgram FullModel<T>::encode_argmax(const Image& image) {
  ad::NoGradGuard guard;
  const auto q = encode(images_to_tensor<T>({image}, geom_), false);
  const std::size_t steps = geom_.T, m = bank_.size();
  LatentProgram p;
  for (std::size_t t = 0; t < steps; ++t) {
    const T* id = q.log_p_id.values().data() + t * m;
    const T* loc = q.log_p_loc.values().data() + t * steps;
    LatentToken tok;
    tok.z_id = static_cast<std::uint32_t>(std::max_element(id, id + m) - id + 1);
    tok.z_loc = static_cast<std::uint32_t>(std::max_element(loc, loc + steps) - loc + 1);
    tok.z_is = q.logit_is.values()[t] > T(0);
    p.tokens.push_back(tok);
  }
  return p;
}

template <class T>
Image FullModel<T>::decode_mean(const Canvas& canvas) {
  ad::NoGradGuard guard;
  const Tensor<T> params = decode(canvases_to_tensor<T>({canvas}), false);
  const std::size_t c = bank_.channels, h = geom_.padded_h(), w = geom_.padded_w(), hw = h * w;
  Image out{h, w, c, std::vector<float>(hw * c)};
  const T* p = params.values().data();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t at = y * w + x;
      if (config_.output == OutputDist::Bernoulli) {
        for (std::size_t ch = 0; ch < c; ++ch)
          out.pixels[at * c + ch] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(p[ch * hw + at]))));
        continue;
      }
      const std::size_t km = static_cast<std::size_t>(config_.mixtures);
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < km; ++k) top = std::max(top, static_cast<double>(p[k * hw + at]));
      std::vector<double> pi(km);
      double z = 0;
      for (std::size_t k = 0; k < km; ++k) z += pi[k] = std::exp(static_cast<double>(p[k * hw + at]) - top);
      for (std::size_t ch = 0; ch < c; ++ch) {
        double m = 0;
        for (std::size_t k = 0; k < km; ++k)
          m += pi[k] / z * std::clamp(static_cast<double>(p[(km + k * c + ch) * hw + at]), -1.0, 1.0);
        out.pixels[at * c + ch] = static_cast<float>((m + 1.0) / 2.0);
      }
    }
  return out;
}

namespace {

std::vector<Image> pick_images(const std::vector<Image>& images, const std::vector<std::size_t>& idx, std::size_t b,
                               std::size_t e) {
  std::vector<Image> out;
  for (std::size_t i = b; i < e; ++i) out.push_back(images[idx[i]]);
  return out;
}

std::vector<LatentProgram> pick_programs(const std::vector<LatentProgram>& programs, const std::vector<std::size_t>& idx,
                                         std::size_t b, std::size_t e) {
  std::vector<LatentProgram> out;
  for (std::size_t i = b; i < e; ++i) out.push_back(programs[idx[i]]);
  return out;
}

std::vector<std::vector<float>> snapshot(const ad::ParameterSet<float>& ps) {
  std::vector<std::vector<float>> out;
  for (const auto& p : ps.parameters()) out.push_back(p.tensor.values());
  for (const auto& b : ps.buffers()) out.push_back(b.tensor.values());
  return out;
}

void restore(ad::ParameterSet<float>& ps, const std::vector<std::vector<float>>& values) {
  std::size_t i = 0;
  for (auto& p : ps.parameters()) p.tensor.values() = values.at(i++);
  for (auto& b : ps.buffers()) b.tensor.values() = values.at(i++);
}

std::uint64_t epoch_seed(std::uint64_t seed, std::size_t epoch) { return seed ^ (0x9e3779b97f4a7c15ULL * (epoch + 1)); }

}  // namespace

void train_full(FullModel<float>& model, const std::vector<Image>& images, const std::vector<LatentProgram>& parsed,
                const TrainConfig& config, TrainState& state,
                const std::function<bool(const EpochRecord&, const TrainState&)>& on_epoch) {
  if (images.empty()) throw std::invalid_argument("train_full: empty dataset");
  if (images.size() != parsed.size()) throw std::invalid_argument("train_full: one parsed program per image required");
  if (config.batch == 0) throw std::invalid_argument("train_full: batch must be positive");
  const auto& geom = model.geometry();
  for (const auto& p : parsed) validate_program(p, geom, model.bank().size());

  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 split_rng(config.seed);
  std::shuffle(order.begin(), order.end(), split_rng);
  auto n_val = static_cast<std::size_t>(std::llround(config.val_fraction * static_cast<double>(images.size())));
  if (n_val >= images.size()) n_val = 0;
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(train.begin(), train.end());

  auto& params = model.params().parameters();
  state.adam.lr = config.lr;
  if (state.epoch == 0) {
    model.params().zero_grad();
    state.history.clear();
    state.best.clear();
    state.best_val = std::numeric_limits<double>::infinity();
  }
  for (std::size_t epoch = state.epoch + 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(epoch_seed(config.seed, epoch));
    std::vector<std::size_t> perm = train;
    std::shuffle(perm.begin(), perm.end(), rng);
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t b = 0; b < perm.size(); b += config.batch) {
      const std::size_t e = std::min(perm.size(), b + config.batch);
      const auto x = images_to_tensor<float>(pick_images(images, perm, b, e), geom);
      const auto tok = one_hot_tokens<float>(pick_programs(parsed, perm, b, e), model.bank().size(), geom.T);
      const auto terms = model.loss(x, tok, rng, true);
      ad::backward(terms.loss);
      ad::adam_step(params, state.adam);
      const double w = static_cast<double>(e - b);
      rec.loss += static_cast<double>(terms.loss.item()) * w;
      rec.neg_elbo -= terms.elbo * w;
      rec.recon += terms.recon * w;
      rec.kl += terms.kl * w;
      rec.reg += terms.reg * w;
    }
    const double n = static_cast<double>(perm.size());
    rec.loss /= n;
    rec.neg_elbo /= n;
    rec.recon /= n;
    rec.kl /= n;
    rec.reg /= n;
    if (val.empty()) {
      rec.val_loss = rec.loss;
    } else {
      ad::NoGradGuard guard;
      std::mt19937_64 vrng(epoch_seed(config.seed, 0));
      double total = 0;
      for (std::size_t b = 0; b < val.size(); b += config.batch) {
        const std::size_t e = std::min(val.size(), b + config.batch);
        const auto x = images_to_tensor<float>(pick_images(images, val, b, e), geom);
        const auto tok = one_hot_tokens<float>(pick_programs(parsed, val, b, e), model.bank().size(), geom.T);
        total += static_cast<double>(model.loss(x, tok, vrng, false).loss.item()) * static_cast<double>(e - b);
      }
      rec.val_loss = total / static_cast<double>(val.size());
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    state.history.push_back(rec);
    if (rec.val_loss < state.best_val) {
      state.best_val = rec.val_loss;
      state.best_epoch = epoch;
      state.best = snapshot(model.params());
    }
    state.epoch = epoch;
    if (on_epoch && !on_epoch(rec, state)) return;
  }
  if (!state.best.empty()) restore(model.params(), state.best);
}

double parse_agreement(FullModel<float>& model, const std::vector<Image>& images, const std::vector<LatentProgram>& parsed) {
  if (images.empty() || images.size() != parsed.size())
    throw std::invalid_argument("parse_agreement: one parsed program per image required");
  ad::NoGradGuard guard;
  const auto& geom = model.geometry();
  const std::size_t steps = geom.T, m = model.bank().size();
  std::size_t agree = 0;
  std::vector<std::size_t> idx(images.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t b = 0; b < images.size(); b += 100) {
    const std::size_t e = std::min(images.size(), b + 100);
    const auto q = model.encode(images_to_tensor<float>(pick_images(images, idx, b, e), geom), false);
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t row = (i - b) * steps + t;
        const bool is = q.logit_is.values()[row] > 0.0f;
        const float* id = q.log_p_id.values().data() + row * m;
        const auto best = static_cast<std::uint32_t>(std::max_element(id, id + m) - id + 1);
        const auto& want = parsed[i].tokens.at(t);
        agree += is == want.z_is && (!is || best == want.z_id);
      }
  }
  return static_cast<double>(agree) / static_cast<double>(images.size() * steps);
}

IwaeResult eval_nll_iwae(FullModel<float>& model, const std::vector<Image>& images, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("eval_nll_iwae: k must be >= 1");
  if (images.empty()) throw std::invalid_argument("eval_nll_iwae: empty dataset");
  ad::NoGradGuard guard;
  const auto& geom = model.geometry();
  std::mt19937_64 rng(seed);
  IwaeResult res;
  const std::size_t per_chunk = std::max<std::size_t>(1, 100 / k);
  for (std::size_t b = 0; b < images.size(); b += per_chunk) {
    const std::size_t e = std::min(images.size(), b + per_chunk);
    std::vector<Image> rep;
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t j = 0; j < k; ++j) rep.push_back(images[i]);
    const auto x = images_to_tensor<float>(rep, geom);
    const auto s = model.sample_terms(x, rng, false, true);
    for (std::size_t i = 0; i < e - b; ++i) {
      std::vector<double> lw(k);
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t r = i * k + j;
        lw[j] = static_cast<double>(s.recon.values()[r]) + static_cast<double>(s.log_prior.values()[r]) -
                static_cast<double>(s.log_post.values()[r]);
      }
      const double top = *std::max_element(lw.begin(), lw.end());
      double acc = 0;
      for (double v : lw) acc += std::exp(v - top);
      res.bounds.push_back(top + std::log(acc) - std::log(static_cast<double>(k)));
    }
  }
  const double n = static_cast<double>(res.bounds.size());
  res.mean_bound = std::accumulate(res.bounds.begin(), res.bounds.end(), 0.0) / n;
  double var = 0;
  for (double v : res.bounds) var += (v - res.mean_bound) * (v - res.mean_bound);
  res.std_error = n > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
  if (model.config().output == OutputDist::Bernoulli) {
    res.nll = -res.mean_bound;
  } else {
    const double dims = static_cast<double>(model.bank().channels * geom.padded_h() * geom.padded_w());
    res.nll = -res.mean_bound / (dims * std::log(2.0));
  }
  return res;
}

#define NPDRAW_VAE_INSTANTIATE(T)                                                                            \
  template Tensor<T> images_to_tensor<T>(const std::vector<Image>&, const GridGeometry&);                    \
  template Tensor<T> canvases_to_tensor<T>(const std::vector<Canvas>&);                                      \
  template class FullModel<T>;                                                                               \
  template TokenTensors<T> sample_posterior<T>(const StepConditionals<T>&, double, bool, std::mt19937_64&); \
  template std::vector<LatentProgram> tokens_to_programs<T>(const TokenTensors<T>&);

NPDRAW_VAE_INSTANTIATE(float)
NPDRAW_VAE_INSTANTIATE(double)

}  // namespace npdraw
