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

#include "npdraw/gumbel.hpp"

#include <cmath>
#include <stdexcept>

#include "npdraw/ops.hpp"

namespace npdraw::ad {

namespace {

// Uniform draw in the open interval (0, 1).
double open_uniform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  while (x <= 0.0) x = u(rng);
  return x;
}

void check_temperature(double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("temperature must be positive, got " + std::to_string(temperature));
  }
}

}  // namespace

template <class T>
Tensor<T> gumbel_softmax_sample(const Tensor<T>& logits, double temperature, bool hard,
                                std::mt19937_64& rng) {
  check_temperature(temperature);
  std::vector<T> noise(logits.numel());
  for (auto& g : noise) g = static_cast<T>(-std::log(-std::log(open_uniform(rng))));
  const Tensor<T> perturbed = add(logits, Tensor<T>::from(logits.shape(), std::move(noise)));
  const Tensor<T> soft = softmax(scale(perturbed, static_cast<T>(1.0 / temperature)), -1);
  if (!hard) return soft;
  const std::size_t k = logits.shape().back();
  std::vector<T> onehot(soft.numel(), T(0));
  for (std::size_t r = 0; r < soft.numel() / k; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (soft.data()[r * k + j] > soft.data()[r * k + best]) best = j;
    onehot[r * k + best] = T(1);
  }
  return straight_through(Tensor<T>::from(logits.shape(), std::move(onehot)), soft);
}

template <class T>
Tensor<T> binary_concrete_sample(const Tensor<T>& logits, double temperature, bool hard,
                                 std::mt19937_64& rng) {
  check_temperature(temperature);
  std::vector<T> noise(logits.numel());
  for (auto& l : noise) {
    const double u = open_uniform(rng);
    l = static_cast<T>(std::log(u) - std::log1p(-u));
  }
  const Tensor<T> perturbed = add(logits, Tensor<T>::from(logits.shape(), std::move(noise)));
  const Tensor<T> soft = sigmoid(scale(perturbed, static_cast<T>(1.0 / temperature)));
  if (!hard) return soft;
  std::vector<T> bits(soft.numel());
  // Threshold on the perturbed logit so saturated probabilities stay exact.
  for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = perturbed.data()[i] > T(0) ? T(1) : T(0);
  return straight_through(Tensor<T>::from(logits.shape(), std::move(bits)), soft);
}

template Tensor<float> gumbel_softmax_sample(const Tensor<float>&, double, bool, std::mt19937_64&);
template Tensor<double> gumbel_softmax_sample(const Tensor<double>&, double, bool, std::mt19937_64&);
template Tensor<float> binary_concrete_sample(const Tensor<float>&, double, bool, std::mt19937_64&);
template Tensor<double> binary_concrete_sample(const Tensor<double>&, double, bool, std::mt19937_64&);

}  // namespace npdraw::ad
