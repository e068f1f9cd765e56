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

#include "npdraw/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

namespace npdraw {

void Dataset::validate() const {
  if (images.empty()) return;
  const Image& first = images.front();
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = images[i];
    if (im.height != first.height || im.width != first.width || im.channels != first.channels) {
      throw std::invalid_argument("dataset: image " + std::to_string(i) + " shape differs from image 0");
    }
    if (im.pixels.size() != im.height * im.width * im.channels) {
      throw std::invalid_argument("dataset: image " + std::to_string(i) + " has inconsistent pixel count");
    }
    for (float v : im.pixels) {
      if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("dataset: pixel outside [0,1] in image " + std::to_string(i));
    }
  }
  if (has_labels() && labels.size() != images.size()) throw std::invalid_argument("dataset: label count mismatch");
}

namespace {

std::uint32_t be32(const std::string& b, std::size_t at) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(b[at + 3]));
}

void put_be32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::optional<std::filesystem::path>& labels_path) {
  const std::string b = read_file(images_path);
  if (b.size() < 16) throw FormatError("IDX: truncated header in " + images_path.string());
  if (be32(b, 0) != 0x00000803) throw FormatError("IDX: bad image magic in " + images_path.string());
  const std::size_t n = be32(b, 4), h = be32(b, 8), w = be32(b, 12);
  if (b.size() - 16 < n * h * w) throw FormatError("IDX: truncated image payload in " + images_path.string());
  Dataset ds;
  ds.name = images_path.stem().string();
  ds.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image im = Image::zeros(h, w, 1);
    const std::size_t off = 16 + i * h * w;
    for (std::size_t p = 0; p < h * w; ++p) im.pixels[p] = static_cast<unsigned char>(b[off + p]) / 255.0f;
    ds.images.push_back(std::move(im));
  }
  if (labels_path) {
    const std::string l = read_file(*labels_path);
    if (l.size() < 8) throw FormatError("IDX: truncated label header in " + labels_path->string());
    if (be32(l, 0) != 0x00000801) throw FormatError("IDX: bad label magic in " + labels_path->string());
    const std::size_t nl = be32(l, 4);
    if (nl != n) throw FormatError("IDX: " + std::to_string(n) + " images but " + std::to_string(nl) + " labels");
    if (l.size() - 8 < nl) throw FormatError("IDX: truncated label payload in " + labels_path->string());
    ds.labels.resize(nl);
    for (std::size_t i = 0; i < nl; ++i) ds.labels[i] = static_cast<unsigned char>(l[8 + i]);
  }
  return ds;
}

void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
               const std::optional<std::filesystem::path>& labels_path) {
  ds.validate();
  const std::size_t h = ds.images.empty() ? 0 : ds.images[0].height;
  const std::size_t w = ds.images.empty() ? 0 : ds.images[0].width;
  if (!ds.images.empty() && ds.images[0].channels != 1) throw FormatError("IDX: only single-channel images");
  std::string out;
  put_be32(out, 0x00000803);
  put_be32(out, static_cast<std::uint32_t>(ds.size()));
  put_be32(out, static_cast<std::uint32_t>(h));
  put_be32(out, static_cast<std::uint32_t>(w));
  for (const Image& im : ds.images)
    for (float v : im.pixels) out.push_back(static_cast<char>(std::lround(v * 255.0f)));
  write_file(images_path, out);
  if (labels_path && ds.has_labels()) {
    std::string lb;
    put_be32(lb, 0x00000801);
    put_be32(lb, static_cast<std::uint32_t>(ds.labels.size()));
    for (int v : ds.labels) lb.push_back(static_cast<char>(v));
    write_file(*labels_path, lb);
  }
}

Dataset load_dataset(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) throw std::runtime_error("dataset not found: " + path.string());
  Dataset ds;
  if (fs::is_regular_file(path)) {
    ds = load_idx(path);
  } else if (fs::exists(path / "images.idx3-ubyte")) {
    const fs::path labels = path / "labels.idx1-ubyte";
    ds = load_idx(path / "images.idx3-ubyte",
                  fs::exists(labels) ? std::optional<fs::path>(labels) : std::nullopt);
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path)) {
      const auto ext = e.path().extension();
      if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path());
    }
    if (files.empty()) throw std::runtime_error("no images found in " + path.string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) ds.images.push_back(read_image(f));
  }
  ds.name = path.filename().string();
  ds.validate();
  return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, SplitMode mode, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("split: fraction must lie in (0, 1]");
  std::vector<bool> keep(ds.size(), false);
  if (mode == SplitMode::BySample) {
    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    const auto n = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
    for (std::size_t i = 0; i < std::min(n, ds.size()); ++i) keep[order[i]] = true;
  } else {
    if (!ds.has_labels()) throw std::invalid_argument("split: by-class split needs labels");
    const std::set<int> classes(ds.labels.begin(), ds.labels.end());
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(classes.size()) - 1e-9));
    std::set<int> kept;
    for (int c : classes) {
      if (kept.size() == n) break;
      kept.insert(c);
    }
    for (std::size_t i = 0; i < ds.size(); ++i) keep[i] = kept.count(ds.labels[i]) > 0;
  }
  Dataset train, held;
  for (auto* part : {&train, &held}) {
    part->name = ds.name;
    part->seed = seed;
  }
  const std::string tag = (mode == SplitMode::BySample ? "by-sample:" : "by-class:") + std::to_string(fraction);
  train.split = tag + ":train";
  held.split = tag + ":heldout";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Dataset& dst = keep[i] ? train : held;
    dst.images.push_back(ds.images[i]);
    if (ds.has_labels()) dst.labels.push_back(ds.labels[i]);
  }
  return {std::move(train), std::move(held)};
}

}  // namespace npdraw
