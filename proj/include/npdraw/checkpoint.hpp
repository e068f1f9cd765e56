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

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include "npdraw/prior.hpp"
#include "npdraw/vae.hpp"

namespace npdraw {

struct NamedTensor {
  std::string name;
  ad::Shape shape;
  std::vector<float> data;
};

/// NPCK container: magic, u16 version, JSON config, named f32 tensors, CRC32.
struct Checkpoint {
  nlohmann::json config = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  /// Throws FormatError when absent.
  const NamedTensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct PriorBundle {
  PriorModel<float> model;
  GridGeometry geom;
};

Checkpoint prior_checkpoint(const PriorModel<float>& model, const GridGeometry& geom);
PriorBundle prior_from_checkpoint(const Checkpoint& ckpt);

/// Everything needed to evaluate, edit or resume: model, frozen prior, bank, geometry and trainer state.
struct FullBundle {
  FullModel<float> model;
  TrainState state;
  TrainConfig train;
};

Checkpoint full_checkpoint(const FullModel<float>& model, const TrainState& state, const TrainConfig& train);
FullBundle full_from_checkpoint(const Checkpoint& ckpt);

}  // namespace npdraw
