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

#include "npdraw/parser.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace npdraw {

LatentProgram parse_image(const Image& x, const PartBank& bank, const GridGeometry& geom, const ParseConfig& config) {
  if (config.epsilon < 0.0) throw std::invalid_argument("parse: epsilon must be non-negative");
  if (bank.patch_size != geom.patch_size || bank.channels != x.channels) {
    throw std::invalid_argument("parse: bank does not match image channels or grid cell size");
  }
  const Image padded = pad_image(x, geom);
  const std::size_t k = geom.patch_size, c = x.channels;
  LatentProgram program;
  program.tokens.reserve(geom.T);
  std::vector<float> crop(k * k * c);
  for (std::size_t t = 1; t <= geom.T; ++t) {
    const auto [r0, c0] = geom.cell_origin(t);
    double norm = 0.0;
    for (std::size_t y = 0; y < k; ++y)
      for (std::size_t xx = 0; xx < k; ++xx)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const float v = padded.at(r0 + y, c0 + xx, ch);
          crop[(y * k + xx) * c + ch] = v;
          norm += static_cast<double>(v) * v;
        }
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 1;
    for (std::size_t m = 1; m <= bank.size(); ++m) {
      const double d = squared_distance(crop, bank.part(m));
      if (d < best) {
        best = d;
        arg = m;
      }
    }
    const double cost = std::sqrt(best) - std::sqrt(norm);
    program.tokens.push_back({static_cast<std::uint32_t>(t), static_cast<std::uint32_t>(arg), cost <= config.epsilon});
  }
  return program;
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return 99.0;
  return std::min(99.0, -10.0 * std::log10(mse));
}

double parse_psnr(const Image& x, const LatentProgram& program, const PartBank& bank, const GridGeometry& geom) {
  const Image padded = pad_image(x, geom);
  const Canvas c = render_program(program, bank, geom);
  double se = 0.0;
  for (std::size_t i = 0; i < padded.pixels.size(); ++i) {
    const double d = static_cast<double>(padded.pixels[i]) - c.pixels[i];
    se += d * d;
  }
  return psnr_from_mse(se / static_cast<double>(padded.pixels.size()));
}

}  // namespace npdraw
