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
#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "npdraw/image.hpp"

namespace npdraw {

struct Patch {
  std::vector<float> pixels;  // K x K x C, channels interleaved
  std::size_t image = 0, row = 0, col = 0;
};

struct BankBuildConfig {
  std::size_t patch_size = 5;
  std::size_t bank_size = 50;
  std::size_t per_image = 20;
  std::size_t cap = 50000;
  std::uint64_t seed = 0;
  std::size_t max_iters = 50;
  // Sample only grid-aligned positions (multiples of K) instead of any offset.
  bool grid_aligned = false;
  // Drop patches whose L2 norm is at most this value before clustering; < 0 keeps all.
  double min_norm = -1.0;
};

/// The M exemplar parts. Part ids are 1-based everywhere outside this struct.
struct PartBank {
  std::size_t patch_size = 0;
  std::size_t channels = 1;
  std::vector<std::vector<float>> parts;
  BankBuildConfig config;

  std::size_t size() const { return parts.size(); }
  std::size_t part_len() const { return patch_size * patch_size * channels; }
  /// Throws std::out_of_range for ids outside [1, M].
  const std::vector<float>& part(std::size_t id) const;
};

/// Uniform random top-left corners, `per_image` per image, then a seeded
/// uniform subset of at most `cap` patches (kept in sampling order).
std::vector<Patch> sample_patches(const std::vector<Image>& images, std::size_t patch_size, std::size_t per_image,
                                  std::size_t cap, std::mt19937_64& rng, bool grid_aligned = false);

struct KMedoidsResult {
  std::vector<std::size_t> medoids;     // indices into the input points
  std::vector<std::size_t> assignment;  // position in `medoids` for each point
  double cost = 0.0;                    // sum of squared distances to the assigned medoid
  std::vector<double> cost_history;     // cost after initialization and after every iteration
  std::size_t iterations = 0;
};

double squared_distance(const std::vector<float>& a, const std::vector<float>& b);

/// Alternating k-medoids under squared Euclidean distance. Initialization
/// takes the 1-medoid optimum, then farthest points. Each iteration assigns
/// points to their nearest medoid and moves every medoid to the member with
/// the least within-cluster cost. Small pools also get PAM swap refinement
/// and restarts from every point and from seeded D^2 draws, keeping the cheapest run.
/// All ties go to the lowest index.
KMedoidsResult kmedoids(const std::vector<std::vector<float>>& points, std::size_t m, std::size_t max_iters = 50);

PartBank build_bank(const std::vector<Image>& images, const BankBuildConfig& config);

std::string serialize_bank(const PartBank& bank);
PartBank deserialize_bank(std::string_view bytes);
void save_bank(const PartBank& bank, const std::filesystem::path& path);
PartBank load_bank(const std::filesystem::path& path);

}  // namespace npdraw
