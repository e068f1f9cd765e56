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

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace npdraw {

/// Hex SHA-1 of "blob <size>\0" + bytes, as git hashes file contents.
std::string git_blob_hash(std::string_view bytes);

/// Hash of a file, or of a directory as the blob hash of its sorted
/// "<relative path> <file hash>" listing.
std::string hash_path(const std::filesystem::path& path);

struct RunMetadata {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();
  std::vector<std::filesystem::path> inputs;
};

/// Writes {command, seed, config, inputs: [{path, hash}]} as JSON.
void write_run_metadata(const std::filesystem::path& path, const RunMetadata& meta);

}  // namespace npdraw
