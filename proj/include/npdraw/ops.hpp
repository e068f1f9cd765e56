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
#include <random>
#include <vector>

#include "npdraw/tensor.hpp"

// Differentiable tensor ops. Elementwise binary ops broadcast with numpy
// semantics. Every op records itself on the tape when an input requires grad.
namespace npdraw::ad {

template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <class T> Tensor<T> add_scalar(const Tensor<T>& x, T offset);
template <class T> Tensor<T> neg(const Tensor<T>& x);
template <class T> Tensor<T> relu(const Tensor<T>& x);
template <class T> Tensor<T> gelu(const Tensor<T>& x);
template <class T> Tensor<T> sigmoid(const Tensor<T>& x);
template <class T> Tensor<T> tanh(const Tensor<T>& x);
template <class T> Tensor<T> exp(const Tensor<T>& x);
template <class T> Tensor<T> log(const Tensor<T>& x);
template <class T> Tensor<T> softplus(const Tensor<T>& x);
/// log(sigmoid(x)), stable for large |x|.
template <class T> Tensor<T> log_sigmoid(const Tensor<T>& x);

template <class T> Tensor<T> sum(const Tensor<T>& x);
template <class T> Tensor<T> mean(const Tensor<T>& x);
template <class T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false);
template <class T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false);
template <class T> Tensor<T> logsumexp(const Tensor<T>& x, int axis, bool keepdim = false);

template <class T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
template <class T> Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1);

template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& order);
template <class T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
/// Half-open range [begin, end) along one axis.
template <class T> Tensor<T> slice(const Tensor<T>& x, int axis, std::size_t begin, std::size_t end);

/// (..., n, k) x (k, m) or (..., n, k) x (..., k, m) with equal leading extents.
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x: N x Cin x H x W, weight: Cout x Cin x kh x kw, bias: Cout or undefined.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding);
/// x: N x Cin x H x W, weight: Cin x Cout x kh x kw.
/// Output extent (n - 1) * stride - 2 * padding + k + output_padding.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           int stride, int padding, int output_padding);

/// Per-channel normalization over (N, H, W) of an N x C x H x W input, or
/// over N of an N x C input. In training mode the running statistics are
/// updated in place; in eval mode they are used and the op is affine.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5));

/// Normalizes the last axis.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool training, std::mt19937_64& rng);

/// softmax(q k^T / sqrt(d) + mask) v over the last two axes. mask is
/// broadcast-added to the scores; use -inf entries to block attention.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const Tensor<T>& mask);

/// Rows of an (n x d) table selected by index; output shape indices.size() x d.
template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<std::int64_t>& indices);

/// Averages uniform (possibly overlapping) bins of an N x C x H x W map into
/// N x C x out_h x out_w.
template <class T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, std::size_t out_h, std::size_t out_w);

/// Stride-1 window averages: out[n, (c * kh + i) * kw + j] is the mean over
/// all output positions of the zero-padded input at offset (i, j). Spatially
/// mean-pooling conv2d(x, W, b, 1, padding) equals
/// matmul(window_means(x, kh, kw, padding), W^T) + b, without the full conv.
template <class T>
Tensor<T> window_means(const Tensor<T>& x, std::size_t kh, std::size_t kw, int padding);

/// Forward value of `hard`, gradient routed to `soft` unchanged.
template <class T>
Tensor<T> straight_through(const Tensor<T>& hard, const Tensor<T>& soft);

/// Elementwise x*log(sigmoid(l)) + (1-x)*log(1-sigmoid(l)); target x carries no gradient.
template <class T>
Tensor<T> bernoulli_logprob(const Tensor<T>& target, const Tensor<T>& logits);

/// Discretized logistic mixture log-likelihood per pixel.
/// target: N x C x H x W in [-1, 1]; params: N x (mixtures * (1 + 2C)) x H x W
/// laid out as [mixture logits | means (mixture-major, C each) | log scales].
/// Returns N x H x W. Bins have half-width 1/(levels - 1); the two edge bins
/// extend to -inf and +inf.
template <class T>
Tensor<T> logistic_mixture_logprob(const Tensor<T>& target, const Tensor<T>& params, int mixtures,
                                   int levels = 256);

}  // namespace npdraw::ad
