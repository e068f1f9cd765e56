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

#include "npdraw/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace npdraw::ad {

template <class T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw std::logic_error("adam_step: parameter '" + p.name + "' has no grad");
  }
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].tensor.numel(), T(0));
      state.v[i].assign(params[i].tensor.numel(), T(0));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& tensor = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != tensor.numel()) {
      throw std::logic_error("adam_step: moment shape mismatch for '" + params[i].name + "'");
    }
    auto& g = tensor.grad_buffer();
    auto& w = tensor.values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const double mhat = static_cast<double>(m[j]) / c1;
      const double vhat = static_cast<double>(v[j]) / c2;
      w[j] -= static_cast<T>(state.lr * mhat / (std::sqrt(vhat) + state.eps));
      g[j] = T(0);
    }
  }
}

template void adam_step(std::vector<Parameter<float>>&, AdamState<float>&);
template void adam_step(std::vector<Parameter<double>>&, AdamState<double>&);

}  // namespace npdraw::ad
