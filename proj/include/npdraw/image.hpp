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

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace npdraw {

/// Malformed or unsupported file content. The message names the format.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x C image with interleaved channels and values in [0, 1].
struct Image {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<float> pixels;

  static Image zeros(std::size_t h, std::size_t w, std::size_t c = 1) {
    return Image{h, w, c, std::vector<float>(h * w * c, 0.0f)};
  }
  float& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

/// Binary P5 (C = 1) or P6 (C = 3) with maxval 255.
std::string encode_pnm(const Image& img);
Image decode_pnm(std::string_view bytes);

void write_image(const std::filesystem::path& path, const Image& img);
Image read_image(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace npdraw
