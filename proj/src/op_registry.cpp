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

#include "npdraw/op_registry.hpp"

#include <algorithm>
#include <functional>

#include "npdraw/ops.hpp"

namespace npdraw::ad {

long OpAttrs::get_int(const std::string& key, long fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  if (auto* v = std::get_if<long>(&it->second)) return *v;
  if (auto* d = std::get_if<double>(&it->second)) return static_cast<long>(*d);
  throw std::invalid_argument("attribute '" + key + "' is not an integer");
}

double OpAttrs::get_real(const std::string& key, double fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  if (auto* d = std::get_if<double>(&it->second)) return *d;
  if (auto* v = std::get_if<long>(&it->second)) return static_cast<double>(*v);
  throw std::invalid_argument("attribute '" + key + "' is not a real");
}

bool OpAttrs::get_bool(const std::string& key, bool fallback) const {
  auto it = values.find(key);
  if (it == values.end()) return fallback;
  if (auto* b = std::get_if<bool>(&it->second)) return *b;
  throw std::invalid_argument("attribute '" + key + "' is not a boolean");
}

std::vector<long> OpAttrs::get_ints(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end()) throw std::invalid_argument("missing attribute '" + key + "'");
  if (auto* v = std::get_if<std::vector<long>>(&it->second)) return *v;
  throw std::invalid_argument("attribute '" + key + "' is not an integer list");
}

namespace {

template <class T>
using OpFn = std::function<Tensor<T>(std::vector<Tensor<T>>&, const OpAttrs&)>;

void arity(std::string_view kind, const auto& inputs, std::size_t lo, std::size_t hi) {
  if (inputs.size() < lo || inputs.size() > hi) {
    throw std::invalid_argument(std::string(kind) + ": expected " + std::to_string(lo) + ".." +
                                std::to_string(hi) + " inputs, got " + std::to_string(inputs.size()));
  }
}

template <class T>
const std::map<std::string, OpFn<T>, std::less<>>& table() {
  using V = std::vector<Tensor<T>>;
  static const std::map<std::string, OpFn<T>, std::less<>> ops = {
      {"add", [](V& in, const OpAttrs&) { arity("add", in, 2, 2); return add(in[0], in[1]); }},
      {"sub", [](V& in, const OpAttrs&) { arity("sub", in, 2, 2); return sub(in[0], in[1]); }},
      {"mul", [](V& in, const OpAttrs&) { arity("mul", in, 2, 2); return mul(in[0], in[1]); }},
      {"div", [](V& in, const OpAttrs&) { arity("div", in, 2, 2); return div(in[0], in[1]); }},
      {"maximum", [](V& in, const OpAttrs&) { arity("maximum", in, 2, 2); return maximum(in[0], in[1]); }},
      {"matmul", [](V& in, const OpAttrs&) { arity("matmul", in, 2, 2); return matmul(in[0], in[1]); }},
      {"conv2d",
       [](V& in, const OpAttrs& a) {
         arity("conv2d", in, 2, 3);
         return conv2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor<T>(),
                       static_cast<int>(a.get_int("stride", 1)), static_cast<int>(a.get_int("padding", 0)));
       }},
      {"conv_transpose2d",
       [](V& in, const OpAttrs& a) {
         arity("conv_transpose2d", in, 2, 3);
         return conv_transpose2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor<T>(),
                                 static_cast<int>(a.get_int("stride", 1)),
                                 static_cast<int>(a.get_int("padding", 0)),
                                 static_cast<int>(a.get_int("output_padding", 0)));
       }},
      {"batch_norm",
       [](V& in, const OpAttrs& a) {
         arity("batch_norm", in, 5, 5);
         return batch_norm(in[0], in[1], in[2], in[3], in[4], a.get_bool("training", true),
                           static_cast<T>(a.get_real("momentum", 0.1)), static_cast<T>(a.get_real("eps", 1e-5)));
       }},
      {"relu", [](V& in, const OpAttrs&) { arity("relu", in, 1, 1); return relu(in[0]); }},
      {"gelu", [](V& in, const OpAttrs&) { arity("gelu", in, 1, 1); return gelu(in[0]); }},
      {"sigmoid", [](V& in, const OpAttrs&) { arity("sigmoid", in, 1, 1); return sigmoid(in[0]); }},
      {"tanh", [](V& in, const OpAttrs&) { arity("tanh", in, 1, 1); return tanh(in[0]); }},
      {"exp", [](V& in, const OpAttrs&) { arity("exp", in, 1, 1); return exp(in[0]); }},
      {"log", [](V& in, const OpAttrs&) { arity("log", in, 1, 1); return log(in[0]); }},
      {"softplus", [](V& in, const OpAttrs&) { arity("softplus", in, 1, 1); return softplus(in[0]); }},
      {"softmax",
       [](V& in, const OpAttrs& a) { arity("softmax", in, 1, 1); return softmax(in[0], static_cast<int>(a.get_int("axis", -1))); }},
      {"log_softmax",
       [](V& in, const OpAttrs& a) {
         arity("log_softmax", in, 1, 1);
         return log_softmax(in[0], static_cast<int>(a.get_int("axis", -1)));
       }},
      {"layer_norm",
       [](V& in, const OpAttrs& a) {
         arity("layer_norm", in, 3, 3);
         return layer_norm(in[0], in[1], in[2], static_cast<T>(a.get_real("eps", 1e-5)));
       }},
      {"dropout",
       [](V& in, const OpAttrs& a) {
         arity("dropout", in, 1, 1);
         const bool training = a.get_bool("training", false);
         if (training && !a.rng) throw std::invalid_argument("dropout: training mode needs an rng");
         std::mt19937_64 unused(0);
         return dropout(in[0], a.get_real("rate", 0.0), training, a.rng ? *a.rng : unused);
       }},
      {"attention",
       [](V& in, const OpAttrs&) {
         arity("attention", in, 3, 4);
         return attention(in[0], in[1], in[2], in.size() > 3 ? in[3] : Tensor<T>());
       }},
      {"reshape",
       [](V& in, const OpAttrs& a) {
         arity("reshape", in, 1, 1);
         Shape s;
         for (long d : a.get_ints("shape")) s.push_back(static_cast<std::size_t>(d));
         return reshape(in[0], s);
       }},
      {"permute",
       [](V& in, const OpAttrs& a) {
         arity("permute", in, 1, 1);
         std::vector<std::size_t> order;
         for (long d : a.get_ints("order")) order.push_back(static_cast<std::size_t>(d));
         return permute(in[0], order);
       }},
      {"concat", [](V& in, const OpAttrs& a) { return concat(in, static_cast<int>(a.get_int("axis", 0))); }},
      {"slice",
       [](V& in, const OpAttrs& a) {
         arity("slice", in, 1, 1);
         return slice(in[0], static_cast<int>(a.get_int("axis", 0)),
                      static_cast<std::size_t>(a.get_int("begin", 0)), static_cast<std::size_t>(a.get_int("end", 0)));
       }},
      {"sum",
       [](V& in, const OpAttrs& a) {
         arity("sum", in, 1, 1);
         if (!a.values.count("axis")) return sum(in[0]);
         return sum(in[0], static_cast<int>(a.get_int("axis", 0)), a.get_bool("keepdim", false));
       }},
      {"mean",
       [](V& in, const OpAttrs& a) {
         arity("mean", in, 1, 1);
         if (!a.values.count("axis")) return mean(in[0]);
         return mean(in[0], static_cast<int>(a.get_int("axis", 0)), a.get_bool("keepdim", false));
       }},
      {"logsumexp",
       [](V& in, const OpAttrs& a) {
         arity("logsumexp", in, 1, 1);
         return logsumexp(in[0], static_cast<int>(a.get_int("axis", -1)), a.get_bool("keepdim", false));
       }},
      {"embedding",
       [](V& in, const OpAttrs& a) {
         arity("embedding", in, 1, 1);
         std::vector<std::int64_t> idx;
         for (long d : a.get_ints("indices")) idx.push_back(d);
         return embedding(in[0], idx);
       }},
      {"adaptive_avg_pool2d",
       [](V& in, const OpAttrs& a) {
         arity("adaptive_avg_pool2d", in, 1, 1);
         return adaptive_avg_pool2d(in[0], static_cast<std::size_t>(a.get_int("out_h", 1)),
                                    static_cast<std::size_t>(a.get_int("out_w", 1)));
       }},
      {"window_means",
       [](V& in, const OpAttrs& a) {
         arity("window_means", in, 1, 1);
         return window_means(in[0], static_cast<std::size_t>(a.get_int("kh", 3)),
                             static_cast<std::size_t>(a.get_int("kw", 3)), static_cast<int>(a.get_int("padding", 0)));
       }},
  };
  return ops;
}

}  // namespace

template <class T>
Tensor<T> forward_op(std::string_view kind, std::vector<Tensor<T>> inputs, const OpAttrs& attrs) {
  const auto& ops = table<T>();
  auto it = ops.find(kind);
  if (it == ops.end()) throw UnknownOpError("unknown op kind '" + std::string(kind) + "'");
  return it->second(inputs, attrs);
}

std::vector<std::string> known_ops() {
  std::vector<std::string> names;
  for (const auto& [name, fn] : table<float>()) names.push_back(name);
  return names;
}

template Tensor<float> forward_op(std::string_view, std::vector<Tensor<float>>, const OpAttrs&);
template Tensor<double> forward_op(std::string_view, std::vector<Tensor<double>>, const OpAttrs&);

}  // namespace npdraw::ad
