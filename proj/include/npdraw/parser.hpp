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

#include "npdraw/canvas.hpp"

namespace npdraw {

struct ParseConfig {
  double epsilon = 0.01;
};

/// Per cell in raster order: nearest bank part under L2 (ties to the lowest
/// id), drawn iff |x_c - part| - |x_c| <= epsilon.
LatentProgram parse_image(const Image& x, const PartBank& bank, const GridGeometry& geom,
                          const ParseConfig& config = {});

/// 10 log10(1 / MSE) in dB, with MSE = 0 reported as 99 dB.
double psnr_from_mse(double mse);

/// PSNR between the padded image and the rendered program over all padded pixels.
double parse_psnr(const Image& x, const LatentProgram& program, const PartBank& bank, const GridGeometry& geom);

}  // namespace npdraw
