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

#include "npdraw/canvas.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace npdraw {

std::pair<std::size_t, std::size_t> GridGeometry::cell_origin(std::size_t loc) const {
  if (loc < 1 || loc > T) {
    throw std::out_of_range("grid cell " + std::to_string(loc) + " outside [1, " + std::to_string(T) + "]");
  }
  return {((loc - 1) / cols) * patch_size, ((loc - 1) % cols) * patch_size};
}

GridGeometry make_geometry(std::size_t image_h, std::size_t image_w, std::size_t patch_size) {
  if (patch_size < 1) throw std::invalid_argument("make_geometry: patch size must be at least 1");
  GridGeometry g;
  g.image_h = image_h;
  g.image_w = image_w;
  g.patch_size = patch_size;
  g.pad_h = (patch_size - image_h % patch_size) % patch_size;
  g.pad_w = (patch_size - image_w % patch_size) % patch_size;
  g.rows = g.padded_h() / patch_size;
  g.cols = g.padded_w() / patch_size;
  g.T = g.rows * g.cols;
  return g;
}

Canvas empty_canvas(const GridGeometry& geom, std::size_t channels) {
  Canvas c;
  c.height = geom.padded_h();
  c.width = geom.padded_w();
  c.channels = channels;
  c.pixels.assign(c.height * c.width * channels, 0.0f);
  return c;
}

namespace {

template <class F>
void for_cell(const GridGeometry& geom, std::size_t loc, std::size_t channels, F&& f) {
  const auto [r0, c0] = geom.cell_origin(loc);
  const std::size_t k = geom.patch_size, w = geom.padded_w();
  for (std::size_t y = 0; y < k; ++y)
    for (std::size_t x = 0; x < k; ++x)
      for (std::size_t c = 0; c < channels; ++c) f(((r0 + y) * w + (c0 + x)) * channels + c, (y * k + x) * channels + c);
}

void check_bank(const PartBank& bank, const GridGeometry& geom) {
  if (bank.patch_size != geom.patch_size) {
    throw std::invalid_argument("bank patch size " + std::to_string(bank.patch_size) + " does not match grid cell " +
                                std::to_string(geom.patch_size));
  }
}

}  // namespace

Canvas draw_part(const PartBank& bank, std::size_t z_id, std::size_t z_loc, const GridGeometry& geom) {
  check_bank(bank, geom);
  const auto& part = bank.part(z_id);
  Canvas mask = empty_canvas(geom, bank.channels);
  for_cell(geom, z_loc, bank.channels, [&](std::size_t dst, std::size_t src) { mask.pixels[dst] = part[src]; });
  return mask;
}

Canvas update_canvas(const Canvas& prev, const LatentToken& token, const PartBank& bank, const GridGeometry& geom) {
  check_bank(bank, geom);
  const auto& part = bank.part(token.z_id);
  geom.cell_origin(token.z_loc);  // range check even when skipping
  Canvas next = prev;
  next.step = prev.step + 1;
  if (!token.z_is) return next;
  for_cell(geom, token.z_loc, bank.channels,
           [&](std::size_t dst, std::size_t src) { next.pixels[dst] = std::max(next.pixels[dst], part[src]); });
  return next;
}

Canvas render_program(const LatentProgram& program, const PartBank& bank, const GridGeometry& geom) {
  validate_program(program, geom, bank.size());
  Canvas c = empty_canvas(geom, bank.channels);
  for (const auto& tok : program.tokens) c = update_canvas(c, tok, bank, geom);
  return c;
}

std::vector<Canvas> render_history(const LatentProgram& program, const PartBank& bank, const GridGeometry& geom) {
  validate_program(program, geom, bank.size());
  std::vector<Canvas> out{empty_canvas(geom, bank.channels)};
  for (const auto& tok : program.tokens) out.push_back(update_canvas(out.back(), tok, bank, geom));
  return out;
}

Canvas compose_canvases(const Canvas& a, const Canvas& b, const std::set<std::size_t>& cells, const GridGeometry& geom) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels || a.height != geom.padded_h() ||
      a.width != geom.padded_w()) {
    throw std::invalid_argument("compose: canvases do not share the grid geometry");
  }
  for (std::size_t cell : cells) geom.cell_origin(cell);
  Canvas out = a;
  for (std::size_t cell : cells)
    for_cell(geom, cell, a.channels, [&](std::size_t dst, std::size_t) { out.pixels[dst] = b.pixels[dst]; });
  return out;
}

Image pad_image(const Image& img, const GridGeometry& geom) {
  if (img.height != geom.image_h || img.width != geom.image_w) {
    throw std::invalid_argument("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                " does not match geometry " + std::to_string(geom.image_h) + "x" +
                                std::to_string(geom.image_w));
  }
  Image out = Image::zeros(geom.padded_h(), geom.padded_w(), img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y, x, c);
  return out;
}

void validate_program(const LatentProgram& program, const GridGeometry& geom, std::size_t bank_size) {
  if (program.tokens.size() != geom.T) {
    throw std::invalid_argument("program has " + std::to_string(program.tokens.size()) + " tokens, grid has T = " +
                                std::to_string(geom.T));
  }
  for (std::size_t t = 0; t < program.tokens.size(); ++t) {
    const auto& tok = program.tokens[t];
    if (tok.z_loc < 1 || tok.z_loc > geom.T || tok.z_id < 1 || tok.z_id > bank_size) {
      throw std::invalid_argument("token " + std::to_string(t + 1) + " out of range (z_loc " + std::to_string(tok.z_loc) +
                                  ", z_id " + std::to_string(tok.z_id) + ")");
    }
  }
}

std::string format_program(const LatentProgram& program, const ProgramHeader& header) {
  std::ostringstream os;
  os << "NPLT v1 " << header.T << ' ' << header.M << ' ' << header.K << '\n';
  for (std::size_t t = 0; t < program.tokens.size(); ++t) {
    const auto& tok = program.tokens[t];
    os << t + 1 << ' ' << tok.z_loc << ' ' << tok.z_id << ' ' << (tok.z_is ? 1 : 0) << '\n';
  }
  return os.str();
}

LatentProgram parse_program(std::string_view text, ProgramHeader* header) {
  std::istringstream in{std::string(text)};
  std::string magic, version;
  ProgramHeader h;
  if (!(in >> magic >> version) || magic != "NPLT") throw FormatError("NPLT program: bad magic");
  if (version != "v1") throw FormatError("NPLT program: unsupported version " + version);
  if (!(in >> h.T >> h.M >> h.K)) throw FormatError("NPLT program: malformed header");
  LatentProgram p;
  for (std::size_t t = 1; t <= h.T; ++t) {
    long idx, loc, id, is;
    if (!(in >> idx >> loc >> id >> is)) throw FormatError("NPLT program: truncated at token " + std::to_string(t));
    if (idx != static_cast<long>(t)) throw FormatError("NPLT program: expected token index " + std::to_string(t));
    if (loc < 1 || static_cast<std::size_t>(loc) > h.T || id < 1 || static_cast<std::size_t>(id) > h.M ||
        (is != 0 && is != 1)) {
      throw FormatError("NPLT program: token " + std::to_string(t) + " out of range");
    }
    p.tokens.push_back({static_cast<std::uint32_t>(loc), static_cast<std::uint32_t>(id), is == 1});
  }
  std::string extra;
  if (in >> extra) throw FormatError("NPLT program: trailing content after " + std::to_string(h.T) + " tokens");
  if (header) *header = h;
  return p;
}

void save_program(const std::filesystem::path& path, const LatentProgram& program, const ProgramHeader& header) {
  write_file(path, format_program(program, header));
}

LatentProgram load_program(const std::filesystem::path& path, ProgramHeader* header) {
  return parse_program(read_file(path), header);
}

}  // namespace npdraw
