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
#include <utility>
#include <vector>

#include "npdraw/canvas.hpp"
#include "npdraw/dataset.hpp"

namespace npdraw {

/// Synthetic corpus: alphabet stamps placed on distinct grid cells, with
/// pair rules "stamp a at cell i forces stamp b at cell i + 1".
struct GlyphGrammar {
  std::size_t image_size = 28;
  std::size_t patch_size = 5;
  std::vector<std::vector<float>> alphabet;            // 1-channel K x K stamps
  std::vector<std::pair<std::uint32_t, std::uint32_t>> rules;  // 1-based stamp ids
  std::size_t min_cells = 3, max_cells = 7;            // free placements per image
  std::uint64_t seed = 7;

  /// Throws std::invalid_argument if the grammar cannot be realized on its grid.
  void validate(double epsilon = 0.01) const;
};

/// 16 distinct binary stroke stamps and the rules 1=>9, 2=>10, 3=>11, 4=>12.
GlyphGrammar default_grammar(std::uint64_t seed = 7);

/// Stamps touch only cells lying wholly inside the unpadded image.
std::vector<std::size_t> interior_cells(const GridGeometry& geom);

struct GlyphCorpus {
  Dataset dataset;
  std::vector<LatentProgram> programs;  // generating programs; skipped steps carry z_id 1
  PartBank alphabet_bank;               // the alphabet as a bank, stamp m = part m
  GridGeometry geom;
};

GlyphCorpus gen_glyphs(const GlyphGrammar& grammar, std::size_t n);

}  // namespace npdraw
