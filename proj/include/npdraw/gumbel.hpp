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

#include <random>

#include "npdraw/tensor.hpp"

namespace npdraw::ad {

/// Relaxed categorical sample over the last axis of `logits`.
/// hard=true returns the one-hot argmax in the forward pass while the
/// gradient flows through the relaxed sample (straight-through).
template <class T>
Tensor<T> gumbel_softmax_sample(const Tensor<T>& logits, double temperature, bool hard,
                                std::mt19937_64& rng);

/// Binary concrete relaxation of Bernoulli(sigmoid(logits)), elementwise.
template <class T>
Tensor<T> binary_concrete_sample(const Tensor<T>& logits, double temperature, bool hard,
                                 std::mt19937_64& rng);

}  // namespace npdraw::ad
