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

#include "npdraw/part_bank.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include "npdraw/binary_io.hpp"

namespace npdraw {

const std::vector<float>& PartBank::part(std::size_t id) const {
  if (id < 1 || id > parts.size()) {
    throw std::out_of_range("part id " + std::to_string(id) + " outside [1, " + std::to_string(parts.size()) + "]");
  }
  return parts[id - 1];
}

std::vector<Patch> sample_patches(const std::vector<Image>& images, std::size_t patch_size, std::size_t per_image,
                                  std::size_t cap, std::mt19937_64& rng, bool grid_aligned) {
  const std::size_t k = patch_size;
  if (k == 0) throw std::invalid_argument("sample_patches: patch size must be positive");
  std::vector<Patch> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Image& im = images[i];
    if (im.height < k || im.width < k) {
      throw std::invalid_argument("sample_patches: image " + std::to_string(i) + " (" + std::to_string(im.height) +
                                  "x" + std::to_string(im.width) + ") smaller than patch size " + std::to_string(k));
    }
    const std::size_t rows = grid_aligned ? (im.height - k) / k : im.height - k;
    const std::size_t cols = grid_aligned ? (im.width - k) / k : im.width - k;
    std::uniform_int_distribution<std::size_t> ur(0, rows), uc(0, cols);
    for (std::size_t n = 0; n < per_image; ++n) {
      Patch p;
      p.image = i;
      p.row = ur(rng) * (grid_aligned ? k : 1);
      p.col = uc(rng) * (grid_aligned ? k : 1);
      p.pixels.reserve(k * k * im.channels);
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x)
          for (std::size_t c = 0; c < im.channels; ++c) p.pixels.push_back(im.at(p.row + y, p.col + x, c));
      out.push_back(std::move(p));
    }
  }
  if (out.size() > cap) {
    std::vector<std::size_t> idx(out.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    std::vector<Patch> kept;
    kept.reserve(cap);
    for (std::size_t i : idx) kept.push_back(std::move(out[i]));
    out = std::move(kept);
  }
  return out;
}

double squared_distance(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

namespace {

// Identical points collapse into one weighted entry; the clustering is then
// run on the distinct values.
struct WeightedPool {
  std::vector<std::vector<float>> values;
  std::vector<double> weight;
  std::vector<std::size_t> first;  // first input index of each distinct value
  std::vector<std::size_t> of;     // distinct entry for each input point
};

WeightedPool dedupe(const std::vector<std::vector<float>>& points) {
  WeightedPool pool;
  std::map<std::vector<float>, std::size_t> seen;
  pool.of.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto [it, fresh] = seen.emplace(points[i], pool.values.size());
    if (fresh) {
      pool.values.push_back(points[i]);
      pool.weight.push_back(0.0);
      pool.first.push_back(i);
    }
    pool.weight[it->second] += 1.0;
    pool.of[i] = it->second;
  }
  return pool;
}

struct Clustering {
  const WeightedPool& pool;
  std::vector<std::size_t> medoids;  // distinct-entry indices
  std::vector<std::size_t> assign;
  std::vector<double> dist;

  double assign_all() {
    const std::size_t n = pool.values.size();
    assign.assign(n, 0);
    dist.assign(n, 0.0);
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < medoids.size(); ++j) {
        const double d = squared_distance(pool.values[i], pool.values[medoids[j]]);
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      assign[i] = arg;
      dist[i] = best;
      cost += pool.weight[i] * best;
    }
    return cost;
  }

  // Within a cluster, sum_j w_j |x_i - x_j|^2 = W |x_i|^2 - 2 x_i . S + Q,
  // so every candidate medoid is scored in O(dim).
  bool update_medoids() {
    const std::size_t n = pool.values.size(), dim = pool.values[0].size(), m = medoids.size();
    std::vector<std::vector<double>> s(m, std::vector<double>(dim, 0.0));
    std::vector<double> w(m, 0.0), q(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = assign[i];
      double sq = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        s[c][d] += pool.weight[i] * pool.values[i][d];
        sq += static_cast<double>(pool.values[i][d]) * pool.values[i][d];
      }
      w[c] += pool.weight[i];
      q[c] += pool.weight[i] * sq;
    }
    std::vector<double> best(m, std::numeric_limits<double>::infinity());
    std::vector<std::size_t> arg = medoids;
    auto score = [&](std::size_t i, std::size_t c) {
      double sq = 0.0, dot = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        sq += static_cast<double>(pool.values[i][d]) * pool.values[i][d];
        dot += pool.values[i][d] * s[c][d];
      }
      return w[c] * sq - 2.0 * dot + q[c];
    };
    for (std::size_t c = 0; c < m; ++c) best[c] = score(medoids[c], c);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = assign[i];
      const double v = score(i, c);
      // Relative slack keeps rounding noise from swapping between equal-cost members.
      if (v < best[c] - 1e-12 * std::max(1.0, std::abs(best[c]))) {
        best[c] = v;
        arg[c] = i;
      }
    }
    const bool changed = arg != medoids;
    medoids = arg;
    return changed;
  }

  double total_for(const std::vector<std::size_t>& meds) const {
    double cost = 0.0;
    for (std::size_t i = 0; i < pool.values.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j : meds) best = std::min(best, squared_distance(pool.values[i], pool.values[j]));
      cost += pool.weight[i] * best;
    }
    return cost;
  }
};

}  // namespace

namespace {

struct Run {
  std::vector<std::size_t> medoids;
  std::vector<std::size_t> assign;
  double cost = 0.0;
  std::vector<double> history;
  std::size_t iterations = 0;
};

// Grows `init` by farthest points, runs Voronoi iterations, then
// best-improvement swaps when the pool is small.
Run run_from(const WeightedPool& pool, std::vector<std::size_t> init, std::size_t m, std::size_t max_iters) {
  const std::size_t n = pool.values.size();
  Clustering cl{pool, std::move(init), {}, {}};
  cl.assign_all();
  while (cl.medoids.size() < std::min(m, n)) {
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (cl.dist[i] > far_d) {
        far_d = cl.dist[i];
        far = i;
      }
    }
    cl.medoids.push_back(far);
    cl.assign_all();
  }
  Run r;
  double cost = cl.assign_all();
  r.history.push_back(cost);
  if (n > cl.medoids.size()) {
    for (; r.iterations < max_iters; ++r.iterations) {
      if (!cl.update_medoids()) break;
      cost = cl.assign_all();
      r.history.push_back(cost);
    }
    const std::size_t k = cl.medoids.size();
    if (n * k <= 2000) {
      while (r.iterations < max_iters) {
        double best = cost;
        std::vector<std::size_t> best_set;
        for (std::size_t j = 0; j < k; ++j) {
          for (std::size_t i = 0; i < n; ++i) {
            if (std::find(cl.medoids.begin(), cl.medoids.end(), i) != cl.medoids.end()) continue;
            std::vector<std::size_t> trial = cl.medoids;
            trial[j] = i;
            const double c = cl.total_for(trial);
            if (c < best - 1e-12 * std::max(1.0, best)) {
              best = c;
              best_set = trial;
            }
          }
        }
        if (best_set.empty()) break;
        cl.medoids = best_set;
        cost = cl.assign_all();
        r.history.push_back(cost);
        ++r.iterations;
      }
    }
  }
  r.medoids = cl.medoids;
  r.assign = cl.assign;
  r.cost = cost;
  return r;
}

}  // namespace

KMedoidsResult kmedoids(const std::vector<std::vector<float>>& points, std::size_t m, std::size_t max_iters) {
  if (m == 0) throw std::invalid_argument("kmedoids: cluster count must be positive");
  if (points.size() < m) {
    throw std::invalid_argument("kmedoids: " + std::to_string(points.size()) + " points for " + std::to_string(m) +
                                " clusters");
  }
  const WeightedPool pool = dedupe(points);
  const std::size_t n = pool.values.size();
  // The 1-medoid optimum, via the closed form in update_medoids.
  Clustering one{pool, {0}, std::vector<std::size_t>(n, 0), {}};
  one.update_medoids();
  std::vector<std::vector<std::size_t>> starts{{one.medoids[0]}};
  if (n * m <= 2000) {
    // Small pools also restart from every other point, and from seeded D^2 draws
    // (k-means++ style) that reach sets farthest-point growth never proposes.
    for (std::size_t i = 0; i < n && starts.size() < 64; ++i)
      if (i != one.medoids[0]) starts.push_back({i});
    std::mt19937_64 rng(0x6b6d65646f696473ULL ^ (n * 131 + m));
    for (int r = 0; r < 32 && m > 1; ++r) {
      std::vector<std::size_t> init{rng() % n};
      while (init.size() < std::min(m, n)) {
        std::vector<double> d2(n);
        for (std::size_t i = 0; i < n; ++i) {
          double d = std::numeric_limits<double>::infinity();
          for (std::size_t j : init) d = std::min(d, squared_distance(pool.values[i], pool.values[j]));
          d2[i] = d * pool.weight[i];
        }
        if (std::accumulate(d2.begin(), d2.end(), 0.0) <= 0.0) break;
        init.push_back(std::discrete_distribution<std::size_t>(d2.begin(), d2.end())(rng));
      }
      starts.push_back(std::move(init));
    }
  }
  Run best;
  bool have = false;
  for (auto& s : starts) {
    Run r = run_from(pool, std::move(s), m, max_iters);
    if (!have || r.cost < best.cost - 1e-12 * std::max(1.0, best.cost)) {
      best = std::move(r);
      have = true;
    }
  }
  KMedoidsResult out;
  for (std::size_t med : best.medoids) out.medoids.push_back(pool.first[med]);
  out.assignment.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out.assignment[i] = best.assign[pool.of[i]];
  out.cost = best.cost;
  out.cost_history = std::move(best.history);
  out.iterations = best.iterations;
  // Distinct pools smaller than m still need m medoids; repeat the first.
  while (out.medoids.size() < m) out.medoids.push_back(out.medoids.front());
  return out;
}

PartBank build_bank(const std::vector<Image>& images, const BankBuildConfig& config) {
  if (images.empty()) throw std::invalid_argument("build_bank: no images");
  std::mt19937_64 rng(config.seed);
  std::vector<Patch> patches =
      sample_patches(images, config.patch_size, config.per_image, config.cap, rng, config.grid_aligned);
  std::vector<std::vector<float>> points;
  points.reserve(patches.size());
  for (auto& p : patches) {
    if (config.min_norm >= 0.0 && std::sqrt(squared_distance(p.pixels, std::vector<float>(p.pixels.size(), 0.0f))) <= config.min_norm) {
      continue;
    }
    points.push_back(std::move(p.pixels));
  }
  if (points.size() < config.bank_size) {
    throw std::invalid_argument("build_bank: " + std::to_string(points.size()) + " patches for a bank of " +
                                std::to_string(config.bank_size));
  }
  const KMedoidsResult km = kmedoids(points, config.bank_size, config.max_iters);
  PartBank bank;
  bank.patch_size = config.patch_size;
  bank.channels = images.front().channels;
  bank.config = config;
  for (std::size_t idx : km.medoids) bank.parts.push_back(points[idx]);
  for (std::size_t a = 0; a < bank.parts.size(); ++a)
    for (std::size_t b = a + 1; b < bank.parts.size(); ++b)
      if (bank.parts[a] == bank.parts[b]) {
        throw std::runtime_error("build_bank: duplicate medoids " + std::to_string(a + 1) + " and " +
                                 std::to_string(b + 1) + " (patch pool too homogeneous)");
      }
  return bank;
}

namespace {
constexpr char kBankMagic[4] = {'N', 'P', 'B', 'K'};
constexpr std::uint16_t kBankVersion = 1;
}  // namespace

std::string serialize_bank(const PartBank& bank) {
  ByteWriter w;
  w.raw(kBankMagic, 4);
  w.u16(kBankVersion);
  w.u32(static_cast<std::uint32_t>(bank.patch_size));
  w.u32(static_cast<std::uint32_t>(bank.channels));
  w.u32(static_cast<std::uint32_t>(bank.size()));
  for (const auto& p : bank.parts) {
    if (p.size() != bank.part_len()) throw std::invalid_argument("save_bank: part has wrong length");
    for (float v : p) w.f32(v);
  }
  w.u32(crc32_of(w.bytes()));
  return w.take();
}

PartBank deserialize_bank(std::string_view bytes) {
  ByteReader r(bytes, "NPBK part bank");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kBankMagic, 4) != 0) {
    throw FormatError("NPBK part bank: bad magic bytes");
  }
  r.skip(4);
  const std::uint16_t version = r.u16();
  if (version != kBankVersion) throw FormatError("NPBK part bank: unsupported version " + std::to_string(version));
  PartBank bank;
  bank.patch_size = r.u32();
  bank.channels = r.u32();
  const std::size_t m = r.u32();
  const std::size_t len = bank.part_len();
  if (bank.patch_size == 0 || bank.channels == 0 || m == 0) throw FormatError("NPBK part bank: empty dimensions");
  if (r.remaining() != m * len * 4 + 4) throw FormatError("NPBK part bank: payload size mismatch (truncated?)");
  bank.parts.assign(m, std::vector<float>(len));
  for (auto& p : bank.parts)
    for (auto& v : p) v = r.f32();
  const std::uint32_t stored = r.u32();
  if (stored != crc32_of(bytes.substr(0, bytes.size() - 4))) throw FormatError("NPBK part bank: checksum mismatch");
  return bank;
}

void save_bank(const PartBank& bank, const std::filesystem::path& path) { write_file(path, serialize_bank(bank)); }

PartBank load_bank(const std::filesystem::path& path) { return deserialize_bank(read_file(path)); }

}  // namespace npdraw
