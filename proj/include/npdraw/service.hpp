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

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>
#include "npdraw/vae.hpp"

namespace npdraw {

std::string base64_encode(std::string_view bytes);
/// Throws std::invalid_argument on malformed input.
std::string base64_decode(std::string_view text);

struct HttpResponse {
  int status = 200;
  nlohmann::json body;
};

/// Handlers for the latent-editing API. Each is a function of the request and
/// the loaded model; the only state is the content-addressed canvas cache.
class EditService {
 public:
  EditService() = default;
  explicit EditService(std::shared_ptr<FullModel<float>> model);

  HttpResponse health() const;
  /// {"image": base64 PGM/PPM} -> {program, canvas_id, canvas, grid}
  HttpResponse encode(const std::string& body);
  /// {"a": id, "b": id, "cells": [1-based]} -> {canvas_id, preview}
  HttpResponse compose(const std::string& body);
  /// Decoder mean of a cached canvas as base64 PGM/PPM.
  HttpResponse decode(const std::string& canvas_id);
  /// {"seed": n, "temperature": t} -> {program, canvas_id, canvas, image}
  HttpResponse sample(const std::string& body);

  /// Stores a canvas and returns its id (hex SHA-1 of its shape and pixels).
  std::string put_canvas(const Canvas& canvas);
  std::optional<Canvas> canvas(const std::string& id) const;
  std::size_t cache_size() const;
  bool has_model() const { return static_cast<bool>(model_); }

 private:
  nlohmann::json grid_json() const;
  std::optional<HttpResponse> require_model() const;

  std::shared_ptr<FullModel<float>> model_;
  mutable std::mutex model_mutex_;  // the model's forward pass is not reentrant
  mutable std::mutex cache_mutex_;
  std::map<std::string, Canvas> cache_;
};

struct ServeOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string cors_origin = "*";
};

/// Blocks serving HTTP until stop() is called from another thread.
class EditServer {
 public:
  EditServer(EditService& service, ServeOptions options);
  ~EditServer();
  /// Binds and returns the bound port; throws std::runtime_error on failure.
  int bind();
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace npdraw
