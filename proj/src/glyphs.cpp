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

#include "npdraw/glyphs.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <stdexcept>

namespace npdraw {

std::vector<std::size_t> interior_cells(const GridGeometry& geom) {
  std::vector<std::size_t> out;
  for (std::size_t t = 1; t <= geom.T; ++t) {
    const auto [r, c] = geom.cell_origin(t);
    if (r + geom.patch_size <= geom.image_h && c + geom.patch_size <= geom.image_w) out.push_back(t);
  }
  return out;
}

void GlyphGrammar::validate(double epsilon) const {
  const std::size_t len = patch_size * patch_size;
  if (alphabet.empty()) throw std::invalid_argument("glyphs: empty alphabet");
  for (std::size_t a = 0; a < alphabet.size(); ++a) {
    if (alphabet[a].size() != len) throw std::invalid_argument("glyphs: stamp " + std::to_string(a + 1) + " has wrong size");
    double n = 0;
    for (float v : alphabet[a]) {
      if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("glyphs: stamp pixel outside [0,1]");
      n += static_cast<double>(v) * v;
    }
    if (std::sqrt(n) <= epsilon) throw std::invalid_argument("glyphs: stamp " + std::to_string(a + 1) + " is too faint");
    for (std::size_t b = 0; b < a; ++b)
      if (alphabet[a] == alphabet[b]) throw std::invalid_argument("glyphs: stamps must be pairwise distinct");
  }
  const GridGeometry geom = make_geometry(image_size, image_size, patch_size);
  const auto cells = interior_cells(geom);
  if (min_cells > max_cells || max_cells == 0) throw std::invalid_argument("glyphs: bad cell-count range");
  std::map<std::uint32_t, std::uint32_t> next;
  for (auto [a, b] : rules) {
    if (a < 1 || b < 1 || a > alphabet.size() || b > alphabet.size()) throw std::invalid_argument("glyphs: rule names a missing stamp");
    if (!next.emplace(a, b).second) throw std::invalid_argument("glyphs: stamp with two rules");
  }
  // Longest forced chain must fit in one grid row.
  std::size_t longest = 1;
  for (auto [a, b] : next) {
    std::size_t len_chain = 1;
    std::uint32_t cur = a;
    while (next.count(cur)) {
      cur = next[cur];
      if (++len_chain > alphabet.size()) throw std::invalid_argument("glyphs: cyclic rules are unsatisfiable");
    }
    longest = std::max(longest, len_chain);
  }
  std::size_t row_run = 0, best_run = 0;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const bool adjacent = i > 0 && cells[i] == cells[i - 1] + 1 && (cells[i] - 1) % geom.cols != 0;
    row_run = adjacent ? row_run + 1 : 1;
    best_run = std::max(best_run, row_run);
  }
  if (cells.empty() || longest > best_run) throw std::invalid_argument("glyphs: rules unsatisfiable within the grid");
  if (max_cells * longest > cells.size()) throw std::invalid_argument("glyphs: too many cells requested for the grid");
}

GlyphGrammar default_grammar(std::uint64_t seed) {
  GlyphGrammar g;
  g.seed = seed;
  const std::size_t k = g.patch_size;
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  // Random strokes: a short walk over 4-neighbours, each stamp distinct.
  while (g.alphabet.size() < 16) {
    std::vector<float> s(k * k, 0.0f);
    std::uniform_int_distribution<int> pos(0, static_cast<int>(k) - 1), dir(0, 3), len(5, 9);
    int y = pos(rng), x = pos(rng);
    for (int n = 0, steps = len(rng); n < steps; ++n) {
      s[static_cast<std::size_t>(y) * k + static_cast<std::size_t>(x)] = 1.0f;
      static constexpr int dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
      const int d = dir(rng);
      y = std::clamp(y + dy[d], 0, static_cast<int>(k) - 1);
      x = std::clamp(x + dx[d], 0, static_cast<int>(k) - 1);
    }
    if (std::count(s.begin(), s.end(), 1.0f) < 4) continue;
    if (std::find(g.alphabet.begin(), g.alphabet.end(), s) == g.alphabet.end()) g.alphabet.push_back(std::move(s));
  }
  g.rules = {{1, 9}, {2, 10}, {3, 11}, {4, 12}};
  return g;
}

GlyphCorpus gen_glyphs(const GlyphGrammar& grammar, std::size_t n) {
  grammar.validate();
  GlyphCorpus out;
  out.geom = make_geometry(grammar.image_size, grammar.image_size, grammar.patch_size);
  const GridGeometry& geom = out.geom;
  out.alphabet_bank.patch_size = grammar.patch_size;
  out.alphabet_bank.channels = 1;
  out.alphabet_bank.parts = grammar.alphabet;
  out.dataset.name = "glyphs";
  out.dataset.seed = grammar.seed;

  std::map<std::uint32_t, std::uint32_t> next(grammar.rules.begin(), grammar.rules.end());
  std::set<std::uint32_t> targets;
  for (auto [a, b] : grammar.rules) targets.insert(b);
  const auto interior = interior_cells(geom);
  const std::set<std::size_t> inside(interior.begin(), interior.end());
  const auto m = static_cast<std::uint32_t>(grammar.alphabet.size());

  std::mt19937_64 rng(grammar.seed);
  std::uniform_int_distribution<std::size_t> count(grammar.min_cells, grammar.max_cells);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint32_t> stamp(geom.T + 1, 0);
    // Chain length from stamp s under the rules.
    auto chain = [&](std::uint32_t s) {
      std::size_t len = 1;
      while (next.count(s)) s = next.at(s), ++len;
      return len;
    };
    auto fits = [&](std::size_t cell, std::size_t len) {
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t c = cell + j;
        if (!inside.count(c) || stamp[c] != 0) return false;
        if (j > 0 && (c - 1) % geom.cols == 0) return false;  // wrapped to the next row
      }
      return true;
    };
    const std::size_t want = count(rng);
    for (std::size_t placed = 0, attempts = 0; placed < want && attempts < 1000; ++attempts) {
      const std::size_t cell = interior[std::uniform_int_distribution<std::size_t>(0, interior.size() - 1)(rng)];
      // Rule targets only appear through their rule, so P(b at i+1 | a at i) = 1 and
      // b's predecessor is informative.
      std::uint32_t s;
      do {
        s = std::uniform_int_distribution<std::uint32_t>(1, m)(rng);
      } while (targets.count(s));
      if (!fits(cell, chain(s))) continue;
      for (std::size_t c = cell;; ++c) {
        stamp[c] = s;
        if (!next.count(s)) break;
        s = next.at(s);
      }
      ++placed;
    }
    LatentProgram prog;
    for (std::size_t t = 1; t <= geom.T; ++t) {
      prog.tokens.push_back({static_cast<std::uint32_t>(t), stamp[t] ? stamp[t] : 1u, stamp[t] != 0});
    }
    const Canvas c = render_program(prog, out.alphabet_bank, geom);
    Image img = Image::zeros(geom.image_h, geom.image_w, 1);
    for (std::size_t y = 0; y < geom.image_h; ++y)
      for (std::size_t x = 0; x < geom.image_w; ++x) img.at(y, x) = c.at(y, x);
    out.dataset.images.push_back(std::move(img));
    out.programs.push_back(std::move(prog));
  }
  return out;
}

}  // namespace npdraw
