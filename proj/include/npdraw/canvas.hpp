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

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "npdraw/image.hpp"
#include "npdraw/part_bank.hpp"

namespace npdraw {

/// Grid of T = rows * cols disjoint K x K cells over the image after zero
/// padding on the bottom and right. Cells are numbered 1..T in raster order.
struct GridGeometry {
  std::size_t image_h = 0, image_w = 0, patch_size = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t rows = 0, cols = 0, T = 0;

  std::size_t padded_h() const { return image_h + pad_h; }
  std::size_t padded_w() const { return image_w + pad_w; }
  /// Top-left pixel (row, col) of cell `loc`; throws std::out_of_range.
  std::pair<std::size_t, std::size_t> cell_origin(std::size_t loc) const;
  bool operator==(const GridGeometry&) const = default;
};

GridGeometry make_geometry(std::size_t image_h, std::size_t image_w, std::size_t patch_size);

struct LatentToken {
  std::uint32_t z_loc = 1;  // [1, T]
  std::uint32_t z_id = 1;   // [1, M]
  bool z_is = false;
  auto operator<=>(const LatentToken&) const = default;
};

struct LatentProgram {
  std::vector<LatentToken> tokens;
  bool operator==(const LatentProgram&) const = default;
};

/// Drawing surface with the padded image extent.
struct Canvas {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<float> pixels;  // interleaved like Image
  std::size_t step = 0;

  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
  Image image() const { return Image{height, width, channels, pixels}; }
};

Canvas empty_canvas(const GridGeometry& geom, std::size_t channels);

/// Canvas-sized array, zero except part `z_id` placed in cell `z_loc`.
Canvas draw_part(const PartBank& bank, std::size_t z_id, std::size_t z_loc, const GridGeometry& geom);

/// c^t = max(c^{t-1}, Draw(z_id, z_loc)) when z_is, else c^{t-1}; step advances either way.
Canvas update_canvas(const Canvas& prev, const LatentToken& token, const PartBank& bank, const GridGeometry& geom);

/// Folds update_canvas over the tokens from the empty canvas.
Canvas render_program(const LatentProgram& program, const PartBank& bank, const GridGeometry& geom);

/// Every intermediate canvas c^0..c^T.
std::vector<Canvas> render_history(const LatentProgram& program, const PartBank& bank, const GridGeometry& geom);

/// canvas_a with the regions of `cells` copied verbatim from canvas_b.
Canvas compose_canvases(const Canvas& a, const Canvas& b, const std::set<std::size_t>& cells, const GridGeometry& geom);

/// Zero-pads an image to the geometry's padded extent.
Image pad_image(const Image& img, const GridGeometry& geom);

/// Throws std::invalid_argument when the program length or indices do not fit.
void validate_program(const LatentProgram& program, const GridGeometry& geom, std::size_t bank_size);

struct ProgramHeader {
  std::size_t T = 0, M = 0, K = 0;
};

/// Text form: header `NPLT v1 T M K`, then one `t z_loc z_id z_is` line per token.
std::string format_program(const LatentProgram& program, const ProgramHeader& header);
LatentProgram parse_program(std::string_view text, ProgramHeader* header = nullptr);
void save_program(const std::filesystem::path& path, const LatentProgram& program, const ProgramHeader& header);
LatentProgram load_program(const std::filesystem::path& path, ProgramHeader* header = nullptr);

}  // namespace npdraw
