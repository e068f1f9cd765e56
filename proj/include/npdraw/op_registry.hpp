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

#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "npdraw/tensor.hpp"

namespace npdraw::ad {

class UnknownOpError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using AttrValue = std::variant<bool, long, double, std::vector<long>>;

/// Named op attributes ("stride", "padding", "axis", "rate", "training", ...).
struct OpAttrs {
  std::map<std::string, AttrValue> values;
  std::mt19937_64* rng = nullptr;  // dropout only

  OpAttrs& set(const std::string& key, AttrValue v) {
    values[key] = std::move(v);
    return *this;
  }
  long get_int(const std::string& key, long fallback) const;
  double get_real(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<long> get_ints(const std::string& key) const;
};

/// Dispatches an op by name: add, sub, mul, div, maximum, matmul, conv2d,
/// conv_transpose2d, batch_norm, relu, gelu, sigmoid, tanh, exp, log,
/// softplus, softmax, log_softmax, layer_norm, dropout, attention, reshape,
/// permute, concat, slice, sum, mean, logsumexp, embedding,
/// adaptive_avg_pool2d. batch_norm takes (x, gamma, beta, running_mean,
/// running_var). Throws UnknownOpError for anything else.
template <class T>
Tensor<T> forward_op(std::string_view kind, std::vector<Tensor<T>> inputs, const OpAttrs& attrs = {});

std::vector<std::string> known_ops();

}  // namespace npdraw::ad
