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

#include "npdraw/service.hpp"

#include <openssl/evp.h>

#include <httplib.h>

#include "npdraw/binary_io.hpp"
#include "npdraw/metadata.hpp"

namespace npdraw {

using nlohmann::json;

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  std::string clean;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) clean.push_back(c);
  if (clean.size() % 4 != 0) throw std::invalid_argument("base64 length is not a multiple of 4");
  std::string out(clean.size() / 4 * 3, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(clean.data()), static_cast<int>(clean.size()));
  if (n < 0) throw std::invalid_argument("malformed base64 payload");
  std::size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

namespace {

HttpResponse error(int status, const std::string& message) { return {status, {{"error", message}}}; }

json program_json(const LatentProgram& p) {
  json a = json::array();
  for (const auto& t : p.tokens) a.push_back({{"z_loc", t.z_loc}, {"z_id", t.z_id}, {"z_is", t.z_is}});
  return a;
}

json canvas_json(const Canvas& c) {
  return {{"height", c.height}, {"width", c.width}, {"channels", c.channels}, {"pixels", c.pixels}};
}

std::optional<json> parse_body(const std::string& body, HttpResponse& err) {
  try {
    json j = json::parse(body);
    if (!j.is_object()) {
      err = error(400, "request body must be a JSON object");
      return std::nullopt;
    }
    return j;
  } catch (const json::parse_error&) {
    err = error(400, "request body is not valid JSON");
    return std::nullopt;
  }
}

}  // namespace

EditService::EditService(std::shared_ptr<FullModel<float>> model) : model_(std::move(model)) {}

json EditService::grid_json() const {
  const auto& g = model_->geometry();
  return {{"rows", g.rows}, {"cols", g.cols}, {"K", g.patch_size}, {"T", g.T},
          {"image_h", g.image_h}, {"image_w", g.image_w}, {"padded_h", g.padded_h()}, {"padded_w", g.padded_w()},
          {"channels", model_->bank().channels}};
}

std::optional<HttpResponse> EditService::require_model() const {
  if (!model_) return error(503, "no model loaded");
  return std::nullopt;
}

HttpResponse EditService::health() const {
  json j = {{"status", "ok"}, {"model_loaded", has_model()}, {"cached_canvases", cache_size()}};
  if (model_) j["grid"] = grid_json();
  return {200, j};
}

std::string EditService::put_canvas(const Canvas& canvas) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(canvas.height));
  w.u32(static_cast<std::uint32_t>(canvas.width));
  w.u32(static_cast<std::uint32_t>(canvas.channels));
  for (float v : canvas.pixels) w.f32(v);
  const std::string id = git_blob_hash(w.bytes());
  std::lock_guard lock(cache_mutex_);
  cache_.emplace(id, canvas);
  return id;
}

std::optional<Canvas> EditService::canvas(const std::string& id) const {
  std::lock_guard lock(cache_mutex_);
  const auto it = cache_.find(id);
  if (it == cache_.end()) return std::nullopt;
  return it->second;
}

std::size_t EditService::cache_size() const {
  std::lock_guard lock(cache_mutex_);
  return cache_.size();
}

HttpResponse EditService::encode(const std::string& body) {
  if (auto e = require_model()) return *e;
  HttpResponse err;
  const auto req = parse_body(body, err);
  if (!req) return err;
  if (!req->contains("image") || !(*req)["image"].is_string()) return error(400, "missing string field 'image'");
  Image img;
  try {
    img = decode_pnm(base64_decode((*req)["image"].get<std::string>()));
  } catch (const std::exception& e) {
    return error(400, std::string("cannot read image: ") + e.what());
  }
  const auto& g = model_->geometry();
  const std::size_t c = model_->bank().channels;
  if (img.height != g.image_h || img.width != g.image_w || img.channels != c) {
    return error(400, "image is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                          std::to_string(img.channels) + ", model expects " + std::to_string(g.image_h) + "x" +
                          std::to_string(g.image_w) + "x" + std::to_string(c));
  }
  LatentProgram program;
  {
    std::lock_guard lock(model_mutex_);
    program = model_->encode_argmax(img);
  }
  const Canvas canvas = render_program(program, model_->bank(), g);
  const std::string id = put_canvas(canvas);
  return {200, {{"program", program_json(program)}, {"canvas_id", id}, {"canvas", canvas_json(canvas)}, {"grid", grid_json()}}};
}

HttpResponse EditService::compose(const std::string& body) {
  if (auto e = require_model()) return *e;
  HttpResponse err;
  const auto req = parse_body(body, err);
  if (!req) return err;
  for (const char* key : {"a", "b"})
    if (!req->contains(key) || !(*req)[key].is_string()) return error(400, std::string("missing string field '") + key + "'");
  if (req->contains("cells") && !(*req)["cells"].is_array()) return error(400, "'cells' must be an array");
  const auto a = canvas((*req)["a"].get<std::string>());
  const auto b = canvas((*req)["b"].get<std::string>());
  if (!a) return error(404, "unknown canvas id " + (*req)["a"].get<std::string>());
  if (!b) return error(404, "unknown canvas id " + (*req)["b"].get<std::string>());
  const auto& g = model_->geometry();
  std::set<std::size_t> cells;
  for (const auto& v : req->value("cells", json::array())) {
    if (!v.is_number_integer() || v.get<long long>() < 1 || v.get<long long>() > static_cast<long long>(g.T)) {
      return error(400, "invalid cell index " + v.dump() + " (expected 1.." + std::to_string(g.T) + ")");
    }
    cells.insert(v.get<std::size_t>());
  }
  Canvas out;
  try {
    out = compose_canvases(*a, *b, cells, g);
  } catch (const std::exception& e) {
    return error(400, e.what());
  }
  const std::string id = put_canvas(out);
  return {200, {{"canvas_id", id}, {"preview", base64_encode(encode_pnm(out.image()))}}};
}

HttpResponse EditService::decode(const std::string& canvas_id) {
  if (auto e = require_model()) return *e;
  const auto c = canvas(canvas_id);
  if (!c) return error(404, "unknown canvas id " + canvas_id);
  Image img;
  {
    std::lock_guard lock(model_mutex_);
    img = model_->decode_mean(*c);
  }
  return {200, {{"canvas_id", canvas_id}, {"image", base64_encode(encode_pnm(img))}, {"height", img.height},
                {"width", img.width}, {"channels", img.channels}}};
}

HttpResponse EditService::sample(const std::string& body) {
  if (auto e = require_model()) return *e;
  HttpResponse err;
  const auto req = parse_body(body, err);
  if (!req) return err;
  const json seed = req->value("seed", json(0));
  const json temp = req->value("temperature", json(1.0));
  if (!seed.is_number_integer() || seed.get<long long>() < 0) return error(400, "'seed' must be a non-negative integer");
  if (!temp.is_number() || !(temp.get<double>() >= 0.0)) return error(400, "'temperature' must be a number >= 0");
  std::mt19937_64 rng(seed.get<std::uint64_t>());
  PriorSample s;
  Image img;
  {
    std::lock_guard lock(model_mutex_);
    s = sample_prior(model_->prior(), model_->bank(), model_->geometry(), rng, temp.get<double>());
    img = model_->decode_mean(s.canvas);
  }
  const std::string id = put_canvas(s.canvas);
  return {200, {{"program", program_json(s.program)}, {"canvas_id", id}, {"canvas", canvas_json(s.canvas)},
                {"image", base64_encode(encode_pnm(img))}}};
}

struct EditServer::Impl {
  Impl(EditService& s, ServeOptions o) : service(s), options(std::move(o)) {}
  EditService& service;
  ServeOptions options;
  httplib::Server server;
  int port = -1;
};

EditServer::EditServer(EditService& service, ServeOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  auto& s = impl_->server;
  auto& svc = impl_->service;
  const std::string origin = impl_->options.cors_origin;
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  s.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  s.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  s.Get("/health", [&svc, reply](const httplib::Request&, httplib::Response& res) { reply(res, svc.health()); });
  s.Post("/encode", [&svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc.encode(req.body)); });
  s.Post("/compose", [&svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc.compose(req.body)); });
  s.Post("/sample", [&svc, reply](const httplib::Request& req, httplib::Response& res) { reply(res, svc.sample(req.body)); });
  s.Get(R"(/decode/([0-9A-Za-z]+))", [&svc, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, svc.decode(req.matches[1]));
  });
  s.set_error_handler([reply](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) reply(res, {res.status, {{"error", "no such endpoint"}}});
  });
  s.set_exception_handler([reply](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    reply(res, {500, {{"error", what}}});
  });
}

EditServer::~EditServer() { stop(); }

int EditServer::bind() {
  auto& o = impl_->options;
  impl_->port = o.port == 0 ? impl_->server.bind_to_any_port(o.host) : (impl_->server.bind_to_port(o.host, o.port) ? o.port : -1);
  if (impl_->port < 0) throw std::runtime_error("cannot bind " + o.host + ":" + std::to_string(o.port));
  return impl_->port;
}

void EditServer::listen() {
  if (impl_->port < 0) bind();
  impl_->server.listen_after_bind();
}

void EditServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace npdraw
