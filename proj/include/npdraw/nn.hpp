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

#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "npdraw/ops.hpp"

namespace npdraw::ad {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Owns a model's trainable parameters and its non-trainable buffers
/// (batch-norm running statistics). Names are unique across both.
template <class T>
class ParameterSet {
 public:
  Tensor<T> add_parameter(const std::string& name, Tensor<T> value) {
    claim(name);
    value.set_requires_grad(true);
    params_.push_back({name, value});
    return value;
  }

  Tensor<T> add_buffer(const std::string& name, Tensor<T> value) {
    claim(name);
    value.set_requires_grad(false);
    buffers_.push_back({name, value});
    return value;
  }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<Parameter<T>>& buffers() { return buffers_; }
  const std::vector<Parameter<T>>& buffers() const { return buffers_; }

  /// Materializes zero grads on every parameter, reachable or not.
  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p.tensor.set_requires_grad(on);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  /// Parameter or buffer by name; throws std::out_of_range when absent.
  Tensor<T> find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.tensor;
    for (const auto& b : buffers_)
      if (b.name == name) return b.tensor;
    throw std::out_of_range("no parameter named '" + name + "'");
  }

 private:
  void claim(const std::string& name) {
    if (!names_.emplace(name, true).second) {
      throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
  }

  std::vector<Parameter<T>> params_;
  std::vector<Parameter<T>> buffers_;
  std::unordered_map<std::string, bool> names_;
};

template <class T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<T> v(numel_of(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>::from(std::move(shape), std::move(v));
}

/// y = x W + b over the last axis. W is in x out.
template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight_ = ps.add_parameter(name + ".weight", uniform_tensor<T>({in, out}, bound, rng));
    bias_ = ps.add_parameter(name + ".bias", uniform_tensor<T>({out}, bound, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add(matmul(x, weight_), bias_); }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_;
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
         std::size_t kernel, int stride, int padding, std::mt19937_64& rng)
      : stride_(stride), padding_(padding) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel * kernel));
    weight_ = ps.add_parameter(name + ".weight", uniform_tensor<T>({cout, cin, kernel, kernel}, bound, rng));
    bias_ = ps.add_parameter(name + ".bias", uniform_tensor<T>({cout}, bound, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

  /// Spatial mean of operator()(x) for stride 1, via window_means.
  Tensor<T> pooled(const Tensor<T>& x) const {
    const std::size_t cout = weight_.dim(0), rows = weight_.dim(1) * weight_.dim(2) * weight_.dim(3);
    const Tensor<T> w = permute(reshape(weight_, {cout, rows}), {1, 0});
    return add(matmul(window_means(x, weight_.dim(2), weight_.dim(3), padding_), w), bias_);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_;
  int stride_ = 1, padding_ = 0;
};

template <class T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterSet<T>& ps, const std::string& name, std::size_t cin, std::size_t cout,
                  std::size_t kernel, int stride, int padding, int output_padding,
                  std::mt19937_64& rng)
      : stride_(stride), padding_(padding), output_padding_(output_padding) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cout * kernel * kernel));
    weight_ = ps.add_parameter(name + ".weight", uniform_tensor<T>({cin, cout, kernel, kernel}, bound, rng));
    bias_ = ps.add_parameter(name + ".bias", uniform_tensor<T>({cout}, bound, rng));
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    return conv_transpose2d(x, weight_, bias_, stride_, padding_, output_padding_);
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }

 private:
  Tensor<T> weight_, bias_;
  int stride_ = 1, padding_ = 0, output_padding_ = 0;
};

template <class T>
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParameterSet<T>& ps, const std::string& name, std::size_t channels) {
    gamma_ = ps.add_parameter(name + ".gamma", Tensor<T>::full({channels}, T(1)));
    beta_ = ps.add_parameter(name + ".beta", Tensor<T>::zeros({channels}));
    running_mean_ = ps.add_buffer(name + ".running_mean", Tensor<T>::zeros({channels}));
    running_var_ = ps.add_buffer(name + ".running_var", Tensor<T>::full({channels}, T(1)));
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm(x, gamma_, beta_, running_mean_, running_var_, training);
  }

 private:
  Tensor<T> gamma_, beta_, running_mean_, running_var_;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterSet<T>& ps, const std::string& name, std::size_t dim) {
    gamma_ = ps.add_parameter(name + ".gamma", Tensor<T>::full({dim}, T(1)));
    beta_ = ps.add_parameter(name + ".beta", Tensor<T>::zeros({dim}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor<T> gamma_, beta_;
};

/// Two-layer perceptron with a ReLU hidden layer.
template <class T>
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(ParameterSet<T>& ps, const std::string& name, std::size_t in, std::size_t hidden,
          std::size_t out, std::mt19937_64& rng)
      : fc1_(ps, name + ".fc1", in, hidden, rng), fc2_(ps, name + ".fc2", hidden, out, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2_(relu(fc1_(x))); }

  Linear<T>& output_layer() { return fc2_; }

 private:
  Linear<T> fc1_, fc2_;
};

/// Pre-norm Transformer encoder block (ViT layout): x + MHA(LN(x)), then x + MLP(LN(x)).
template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterSet<T>& ps, const std::string& name, std::size_t dim, std::size_t heads,
                   std::size_t ff, double dropout_rate, std::mt19937_64& rng)
      : dim_(dim), heads_(heads), dropout_(dropout_rate),
        ln1_(ps, name + ".ln1", dim),
        q_(ps, name + ".attn.q", dim, dim, rng),
        k_(ps, name + ".attn.k", dim, dim, rng),
        v_(ps, name + ".attn.v", dim, dim, rng),
        o_(ps, name + ".attn.out", dim, dim, rng),
        ln2_(ps, name + ".ln2", dim),
        ff1_(ps, name + ".mlp.fc1", dim, ff, rng),
        ff2_(ps, name + ".mlp.fc2", ff, dim, rng) {
    if (heads == 0 || dim % heads != 0) {
      throw std::invalid_argument("TransformerBlock: hidden size " + std::to_string(dim) +
                                  " not divisible by " + std::to_string(heads) + " heads");
    }
  }

  /// x: B x S x D; mask: S x S additive.
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& mask, bool training,
                       std::mt19937_64& rng) const {
    const std::size_t b = x.dim(0), s = x.dim(1), dh = dim_ / heads_;
    auto split = [&](const Tensor<T>& t) { return permute(reshape(t, {b, s, heads_, dh}), {0, 2, 1, 3}); };
    const Tensor<T> h = ln1_(x);
    Tensor<T> att = attention(split(q_(h)), split(k_(h)), split(v_(h)), mask);
    att = reshape(permute(att, {0, 2, 1, 3}), {b, s, dim_});
    Tensor<T> y = add(x, dropout(o_(att), dropout_, training, rng));
    const Tensor<T> f = ff2_(gelu(ff1_(ln2_(y))));
    return add(y, dropout(f, dropout_, training, rng));
  }

 private:
  std::size_t dim_ = 0, heads_ = 1;
  double dropout_ = 0.0;
  LayerNorm<T> ln1_;
  Linear<T> q_, k_, v_, o_;
  LayerNorm<T> ln2_;
  Linear<T> ff1_, ff2_;
};

/// Additive causal mask: 0 on and below the diagonal, -inf above.
template <class T>
Tensor<T> causal_mask(std::size_t steps) {
  std::vector<T> m(steps * steps, T(0));
  for (std::size_t i = 0; i < steps; ++i)
    for (std::size_t j = i + 1; j < steps; ++j) m[i * steps + j] = -std::numeric_limits<T>::infinity();
  return Tensor<T>::from({steps, steps}, std::move(m));
}

/// Fixed sinusoidal embedding of positions 0..steps-1.
template <class T>
Tensor<T> sinusoidal_positions(std::size_t steps, std::size_t dim) {
  std::vector<T> pe(steps * dim);
  for (std::size_t pos = 0; pos < steps; ++pos)
    for (std::size_t i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      pe[pos * dim + i] = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return Tensor<T>::from({steps, dim}, std::move(pe));
}

}  // namespace npdraw::ad
