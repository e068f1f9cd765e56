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

#include "npdraw/checkpoint.hpp"

#include <cstring>

#include "npdraw/binary_io.hpp"

namespace npdraw {

namespace {

constexpr char kMagic[4] = {'N', 'P', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kMaxRank = 8;

nlohmann::json geometry_json(const GridGeometry& g) {
  return {{"image_h", g.image_h}, {"image_w", g.image_w}, {"patch_size", g.patch_size}};
}

GridGeometry geometry_from(const nlohmann::json& j) {
  return make_geometry(j.at("image_h").get<std::size_t>(), j.at("image_w").get<std::size_t>(),
                       j.at("patch_size").get<std::size_t>());
}

template <class T>
void add_set(Checkpoint& c, const std::string& prefix, const ad::ParameterSet<T>& ps) {
  for (const auto* list : {&ps.parameters(), &ps.buffers()})
    for (const auto& p : *list)
      c.tensors.push_back({prefix + p.name, p.tensor.shape(), std::vector<float>(p.tensor.values().begin(),
                                                                                 p.tensor.values().end())});
}

void fill(ad::Tensor<float> t, const NamedTensor& src) {
  if (src.shape != t.shape()) {
    throw FormatError("NPCK checkpoint: tensor '" + src.name + "' has shape " + ad::shape_str(src.shape) +
                      ", model expects " + ad::shape_str(t.shape()));
  }
  t.values() = src.data;
}

void load_set(const Checkpoint& c, const std::string& prefix, ad::ParameterSet<float>& ps) {
  for (auto* list : {&ps.parameters(), &ps.buffers()})
    for (auto& p : *list) fill(p.tensor, c.tensor(prefix + p.name));
}

nlohmann::json record_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"loss", r.loss}, {"neg_elbo", r.neg_elbo}, {"recon", r.recon},
          {"kl", r.kl},       {"reg", r.reg},   {"val_loss", r.val_loss}, {"seconds", r.seconds}};
}

EpochRecord record_from(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch");
  r.loss = j.at("loss");
  r.neg_elbo = j.at("neg_elbo");
  r.recon = j.at("recon");
  r.kl = j.at("kl");
  r.reg = j.at("reg");
  r.val_loss = j.at("val_loss");
  r.seconds = j.at("seconds");
  return r;
}

// JSON has no infinity; an unset best is stored as null.
nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

const NamedTensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("NPCK checkpoint: missing tensor '" + name + "'");
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u16(kVersion);
  w.str(ckpt.config.dump());
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    if (t.data.size() != ad::numel_of(t.shape)) throw std::invalid_argument("checkpoint tensor '" + t.name + "' size mismatch");
    w.str(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (float v : t.data) w.f32(v);
  }
  w.u32(crc32_of(w.bytes()));
  return w.take();
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  const std::string fmt = "NPCK checkpoint";
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError(fmt + ": bad magic bytes");
  if (bytes.size() < 10) throw FormatError(fmt + ": truncated file");
  ByteReader tail(bytes.substr(bytes.size() - 4), fmt);
  if (tail.u32() != crc32_of(bytes.substr(0, bytes.size() - 4))) throw FormatError(fmt + ": checksum mismatch");
  ByteReader r(bytes.substr(0, bytes.size() - 4), fmt);
  r.skip(4);
  const std::uint16_t version = r.u16();
  if (version != kVersion) throw FormatError(fmt + ": unsupported version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(fmt + ": config is not valid JSON (" + e.what() + ")");
  }
  const std::size_t n = r.u32();
  for (std::size_t i = 0; i < n; ++i) {
    NamedTensor t;
    t.name = r.str();
    const std::size_t rank = r.u32();
    if (rank > kMaxRank) throw FormatError(fmt + ": tensor '" + t.name + "' has rank " + std::to_string(rank));
    std::size_t count = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<std::size_t>(r.u64()));
      count *= t.shape.back();
    }
    if (count > r.remaining() / 4) throw FormatError(fmt + ": truncated file");
    t.data.resize(count);
    for (auto& v : t.data) v = r.f32();
    c.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw FormatError(fmt + ": trailing bytes after tensor table");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

Checkpoint prior_checkpoint(const PriorModel<float>& model, const GridGeometry& geom) {
  Checkpoint c;
  c.config = {{"kind", "prior"}, {"prior", model.config().to_json()}, {"geometry", geometry_json(geom)}};
  add_set(c, "", model.params());
  return c;
}

PriorBundle prior_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.config.value("kind", "") != "prior") throw FormatError("NPCK checkpoint: not a prior checkpoint");
  PriorBundle b;
  b.geom = geometry_from(ckpt.config.at("geometry"));
  b.model = PriorModel<float>(PriorConfig::from_json(ckpt.config.at("prior")), 0);
  load_set(ckpt, "", b.model.params());
  return b;
}

Checkpoint full_checkpoint(const FullModel<float>& model, const TrainState& state, const TrainConfig& train) {
  Checkpoint c;
  const PartBank& bank = model.bank();
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : state.history) history.push_back(record_json(r));
  c.config = {{"kind", "full"},
              {"vae", model.config().to_json()},
              {"prior", model.prior().config().to_json()},
              {"geometry", geometry_json(model.geometry())},
              {"bank", {{"patch_size", bank.patch_size}, {"channels", bank.channels}}},
              {"train",
               {{"epochs", train.epochs}, {"batch", train.batch}, {"lr", train.lr}, {"val_fraction", train.val_fraction},
                {"seed", train.seed}}},
              {"state",
               {{"epoch", state.epoch}, {"adam_step", state.adam.step}, {"best_val", finite_or_null(state.best_val)},
                {"best_epoch", state.best_epoch}, {"history", history}}}};
  std::vector<float> parts;
  for (const auto& p : bank.parts) parts.insert(parts.end(), p.begin(), p.end());
  c.tensors.push_back({"bank.parts", {bank.size(), bank.part_len()}, parts});
  add_set(c, "model.", model.params());
  add_set(c, "frozen.", model.prior().params());
  const auto& params = model.params().parameters();
  for (std::size_t i = 0; i < state.adam.m.size(); ++i) {
    c.tensors.push_back({"adam.m." + params.at(i).name, params[i].tensor.shape(), state.adam.m[i]});
    c.tensors.push_back({"adam.v." + params.at(i).name, params[i].tensor.shape(), state.adam.v[i]});
  }
  for (std::size_t i = 0; i < state.best.size(); ++i)
    c.tensors.push_back({"best." + std::to_string(i), {state.best[i].size()}, state.best[i]});
  return c;
}

FullBundle full_from_checkpoint(const Checkpoint& ckpt) {
  const auto& cfg = ckpt.config;
  if (cfg.value("kind", "") != "full") throw FormatError("NPCK checkpoint: not a full-model checkpoint");
  try {
    const GridGeometry geom = geometry_from(cfg.at("geometry"));
    PartBank bank;
    bank.patch_size = cfg.at("bank").at("patch_size");
    bank.channels = cfg.at("bank").at("channels");
    const auto& parts = ckpt.tensor("bank.parts");
    if (parts.shape.size() != 2 || parts.shape[1] != bank.part_len()) throw FormatError("NPCK checkpoint: bad bank shape");
    for (std::size_t m = 0; m < parts.shape[0]; ++m)
      bank.parts.emplace_back(parts.data.begin() + static_cast<std::ptrdiff_t>(m * parts.shape[1]),
                              parts.data.begin() + static_cast<std::ptrdiff_t>((m + 1) * parts.shape[1]));
    PriorModel<float> prior(PriorConfig::from_json(cfg.at("prior")), 0);
    load_set(ckpt, "frozen.", prior.params());

    FullBundle b{FullModel<float>(VaeConfig::from_json(cfg.at("vae")), bank, geom, prior, 0), {}, {}};
    load_set(ckpt, "model.", b.model.params());

    const auto& t = cfg.at("train");
    b.train.epochs = t.at("epochs");
    b.train.batch = t.at("batch");
    b.train.lr = t.at("lr");
    b.train.val_fraction = t.at("val_fraction");
    b.train.seed = t.at("seed");

    const auto& s = cfg.at("state");
    b.state.epoch = s.at("epoch");
    b.state.adam.step = s.at("adam_step");
    b.state.adam.lr = b.train.lr;
    b.state.best_val = s.at("best_val").is_null() ? std::numeric_limits<double>::infinity() : s.at("best_val").get<double>();
    b.state.best_epoch = s.at("best_epoch");
    for (const auto& r : s.at("history")) b.state.history.push_back(record_from(r));
    for (const auto& p : b.model.params().parameters()) {
      if (!ckpt.has("adam.m." + p.name)) break;
      b.state.adam.m.push_back(ckpt.tensor("adam.m." + p.name).data);
      b.state.adam.v.push_back(ckpt.tensor("adam.v." + p.name).data);
    }
    for (std::size_t i = 0; ckpt.has("best." + std::to_string(i)); ++i)
      b.state.best.push_back(ckpt.tensor("best." + std::to_string(i)).data);
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("NPCK checkpoint: malformed config (") + e.what() + ")");
  }
}

}  // namespace npdraw
