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
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "npdraw/image.hpp"

namespace npdraw {

struct Dataset {
  std::vector<Image> images;
  std::vector<int> labels;  // empty when unlabeled
  std::string name;
  std::string split = "full";
  std::uint64_t seed = 0;

  std::size_t size() const { return images.size(); }
  bool has_labels() const { return !labels.empty(); }
  /// Throws std::invalid_argument unless all images share one shape with pixels in [0, 1].
  void validate() const;
};

/// MNIST IDX containers: images magic 0x00000803, labels 0x00000801.
Dataset load_idx(const std::filesystem::path& images_path,
                 const std::optional<std::filesystem::path>& labels_path = std::nullopt);
/// Writes the images (and labels, if any) as IDX files; pixels quantized to bytes.
void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::optional<std::filesystem::path>& labels_path = std::nullopt);

/// A single IDX image file, or a directory holding either `images.idx3-ubyte`
/// (with optional `labels.idx1-ubyte`) or .pgm/.ppm files read in name order.
Dataset load_dataset(const std::filesystem::path& path);

enum class SplitMode { BySample, ByClass };

/// by-sample: a seeded uniform subset of round(fraction * n) images.
/// by-class: images whose label is among the first ceil(fraction * classes)
/// distinct labels. Both keep the original order; heldout gets the rest.
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, SplitMode mode, double fraction, std::uint64_t seed);

}  // namespace npdraw
