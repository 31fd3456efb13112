// Copyright 2026 The slmkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Run configuration shared by every subcommand, document I/O and run
// manifests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "slm/corpus_clean.hpp"
#include "slm/model.hpp"
#include "slm/quality.hpp"
#include "slm/tokenizer.hpp"
#include "slm/train.hpp"

namespace slm {

inline constexpr int kConfigSchemaVersion = 1;

// One JSON file with sections named after the modules. Every key is
// optional; an empty object is the full-size configuration.
struct RunConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  int workers = 1;
  std::string precision = "f32";  // f32 | f64

  clean::CleaningConfig cleaning = clean::CleaningConfig::defaults();
  std::filesystem::path lexicon;  // empty: no user dictionary
  tok::TrainerParams tokenizer;
  model::ModelConfig model;
  train::TrainConfig train;
  train::TrainConfig finetune = train::TrainConfig::finetune_defaults();
  quality::ForestParams quality;

  // Copies seed and workers into every section.
  void propagate();
  void validate() const;
};

nlohmann::json to_json(const RunConfig& config);

// Relative paths inside the file resolve against `base_dir`. Unknown keys
// raise unknown_key with the closest valid key; a schema_version other than
// kConfigSchemaVersion raises schema_mismatch.
RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

// SHA-256 of the canonical JSON dump.
std::string config_hash(const RunConfig& config);

void to_json(nlohmann::json& j, const clean::CleaningConfig& c);
void from_json(const nlohmann::json& j, clean::CleaningConfig& c);

// ---------------------------------------------------------------------------
// Line-delimited JSON

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records);

// {id, source, text}; ids must be unique.
std::vector<clean::RawDocument> read_raw_documents(const std::filesystem::path& path);
void write_clean_documents(const std::filesystem::path& path,
                           const std::vector<clean::CleanDocument>& docs);
std::vector<clean::CleanDocument> read_clean_documents(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifests

struct Manifest {
  std::string tool_version;
  std::vector<std::string> argv;  // without the program name
  std::string cwd;
  std::string config_path;
  std::string config_hash;
  std::uint64_t seed = 0;
  int workers = 1;
  std::map<std::string, std::string> inputs;   // absolute path -> sha256
  std::map<std::string, std::string> outputs;  // absolute path -> sha256

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);
};

// Digest of a file, or of every regular file below a directory.
void add_digests(std::map<std::string, std::string>& into, const std::filesystem::path& path);

// Resolves a relative output path under $SLM_ARTIFACT_ROOT when it is set.
std::filesystem::path artifact_path(const std::filesystem::path& path);

}  // namespace slm
