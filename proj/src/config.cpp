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

#include "slm/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>

#include "slm/error.hpp"
#include "slm/strings.hpp"

namespace slm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string range_to_string(const clean::CodepointRange& r) {
  char buf[32];
  if (r.lo == r.hi) {
    std::snprintf(buf, sizeof(buf), "%04X", static_cast<unsigned>(r.lo));
  } else {
    std::snprintf(buf, sizeof(buf), "%04X-%04X", static_cast<unsigned>(r.lo),
                  static_cast<unsigned>(r.hi));
  }
  return buf;
}

clean::CodepointRange range_from_string(const std::string& s) {
  const auto parse = [&](const std::string& hex) -> char32_t {
    size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(hex, &used, 16);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != hex.size() || v > 0x10FFFF) {
      throw config_error("bad_value", "bad code point range '" + s + "'");
    }
    return static_cast<char32_t>(v);
  };
  const auto dash = s.find('-');
  if (dash == std::string::npos) {
    const char32_t c = parse(s);
    return {c, c};
  }
  return {parse(s.substr(0, dash)), parse(s.substr(dash + 1))};
}

json pairs_to_json(const clean::ReplacementList& pairs) {
  json a = json::array();
  for (const auto& [from, to] : pairs) a.push_back({from, to});
  return a;
}

clean::ReplacementList pairs_from_json(const json& j) {
  clean::ReplacementList out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) throw config_error("bad_value", "replacement pairs are [from, to]");
    out.emplace_back(p[0].get<std::string>(), p[1].get<std::string>());
  }
  return out;
}

void to_json(json& j, const tok::TrainerParams& p) {
  j = {{"target_vocab", p.target_vocab},
       {"shrink_factor", p.shrink_factor},
       {"max_piece_len", p.max_piece_len},
       {"sub_iterations", p.sub_iterations},
       {"seed_vocab_multiplier", p.seed_vocab_multiplier},
       {"min_substring_freq", p.min_substring_freq},
       {"workers", p.workers}};
}

void from_json(const json& j, tok::TrainerParams& p) {
  const tok::TrainerParams d = p;
  p.target_vocab = j.value("target_vocab", d.target_vocab);
  p.shrink_factor = j.value("shrink_factor", d.shrink_factor);
  p.max_piece_len = j.value("max_piece_len", d.max_piece_len);
  p.sub_iterations = j.value("sub_iterations", d.sub_iterations);
  p.seed_vocab_multiplier = j.value("seed_vocab_multiplier", d.seed_vocab_multiplier);
  p.min_substring_freq = j.value("min_substring_freq", d.min_substring_freq);
  p.workers = j.value("workers", d.workers);
}

void to_json(json& j, const quality::ForestParams& p) {
  j = {{"n_trees", p.n_trees},
       {"max_depth", p.max_depth},
       {"features_per_split", p.features_per_split},
       {"bootstrap", p.bootstrap},
       {"seed", p.seed},
       {"workers", p.workers}};
}

void from_json(const json& j, quality::ForestParams& p) {
  const quality::ForestParams d = p;
  p.n_trees = j.value("n_trees", d.n_trees);
  p.max_depth = j.value("max_depth", d.max_depth);
  p.features_per_split = j.value("features_per_split", d.features_per_split);
  p.bootstrap = j.value("bootstrap", d.bootstrap);
  p.seed = j.value("seed", d.seed);
  p.workers = j.value("workers", d.workers);
}

// Every key in `given` must appear in `schema`; nested objects are checked
// recursively.
void check_keys(const json& given, const json& schema, const std::string& where) {
  if (!given.is_object()) {
    throw config_error("bad_value", (where.empty() ? "config" : where) + " must be an object");
  }
  std::vector<std::string> valid;
  for (const auto& [k, _] : schema.items()) valid.push_back(k);
  for (const auto& [k, v] : given.items()) {
    const std::string path = where.empty() ? k : where + "." + k;
    if (!schema.contains(k)) {
      std::string msg = "unknown key '" + path + "'";
      const auto near = nearest_strings(k, valid, 1);
      if (!near.empty()) msg += "; did you mean '" + (where.empty() ? "" : where + ".") + near[0] + "'?";
      throw config_error("unknown_key", msg);
    }
    if (schema.at(k).is_object()) check_keys(v, schema.at(k), path);
  }
}

}  // namespace

void to_json(json& j, const clean::CleaningConfig& c) {
  json ranges = json::array();
  for (const auto& r : c.charset_whitelist) ranges.push_back(range_to_string(r));
  j = {{"charset_whitelist", ranges},
       {"blocked_terms", c.blocked_terms},
       {"max_repeat_run", c.max_repeat_run},
       {"incomplete_sentence_threshold", c.incomplete_sentence_threshold},
       {"variant_map", pairs_to_json(c.variant_map)},
       {"symbol_unification_map", pairs_to_json(c.symbol_unification_map)},
       {"pii_patterns", c.pii_patterns},
       {"web_patterns", c.web_patterns},
       {"pattern_version", c.pattern_version},
       {"sentence_repeat_limit", c.sentence_repeat_limit}};
}

void from_json(const json& j, clean::CleaningConfig& c) {
  if (j.contains("charset_whitelist")) {
    c.charset_whitelist.clear();
    for (const auto& r : j.at("charset_whitelist")) {
      c.charset_whitelist.push_back(range_from_string(r.get<std::string>()));
    }
  }
  if (j.contains("blocked_terms")) c.blocked_terms = j.at("blocked_terms").get<std::vector<std::string>>();
  c.max_repeat_run = j.value("max_repeat_run", c.max_repeat_run);
  c.incomplete_sentence_threshold =
      j.value("incomplete_sentence_threshold", c.incomplete_sentence_threshold);
  if (j.contains("variant_map")) c.variant_map = pairs_from_json(j.at("variant_map"));
  if (j.contains("symbol_unification_map")) {
    c.symbol_unification_map = pairs_from_json(j.at("symbol_unification_map"));
  }
  if (j.contains("pii_patterns")) c.pii_patterns = j.at("pii_patterns").get<std::vector<std::string>>();
  if (j.contains("web_patterns")) c.web_patterns = j.at("web_patterns").get<std::vector<std::string>>();
  c.pattern_version = j.value("pattern_version", c.pattern_version);
  c.sentence_repeat_limit = j.value("sentence_repeat_limit", c.sentence_repeat_limit);
}

void RunConfig::propagate() {
  tokenizer.workers = workers;
  train.seed = finetune.seed = quality.seed = seed;
  train.workers = finetune.workers = quality.workers = workers;
}

void RunConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    throw config_error("schema_mismatch", "config schema_version " + std::to_string(schema_version) +
                                              ", expected " + std::to_string(kConfigSchemaVersion));
  }
  if (precision != "f32" && precision != "f64") {
    throw config_error("bad_value", "precision must be f32 or f64");
  }
  if (workers < 1) throw config_error("bad_value", "workers must be >= 1");
  cleaning.validate();
  tokenizer.validate();
  model.validate();
  train.validate();
  finetune.validate();
  quality.validate();
}

json to_json(const RunConfig& c) {
  json cleaning, tokenizer, quality;
  to_json(cleaning, c.cleaning);
  to_json(tokenizer, c.tokenizer);
  to_json(quality, c.quality);
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"workers", c.workers},
          {"precision", c.precision},
          {"cleaning", cleaning},
          {"segmenter", {{"lexicon", c.lexicon.string()}}},
          {"tokenizer", tokenizer},
          {"model", json(c.model)},
          {"train", json(c.train)},
          {"finetune", json(c.finetune)},
          {"quality", quality}};
}

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  RunConfig c;
  if (!j.is_object()) throw config_error("bad_value", "config must be a JSON object");
  if (!j.contains("schema_version")) {
    throw config_error("schema_mismatch", "config has no schema_version");
  }
  check_keys(j, to_json(c), "");
  try {
    c.schema_version = j.at("schema_version").get<int>();
    if (c.schema_version != kConfigSchemaVersion) c.validate();
    c.seed = j.value("seed", c.seed);
    c.workers = j.value("workers", c.workers);
    c.precision = j.value("precision", c.precision);
    if (j.contains("cleaning")) from_json(j.at("cleaning"), c.cleaning);
    if (j.contains("segmenter") && j.at("segmenter").contains("lexicon")) {
      const fs::path lex = j.at("segmenter").at("lexicon").get<std::string>();
      c.lexicon = lex.empty() || lex.is_absolute() ? lex : base_dir / lex;
    }
    if (j.contains("tokenizer")) from_json(j.at("tokenizer"), c.tokenizer);
    if (j.contains("model")) model::from_json(j.at("model"), c.model);
    if (j.contains("train")) train::from_json(j.at("train"), c.train);
    if (j.contains("finetune")) train::from_json(j.at("finetune"), c.finetune);
    if (j.contains("quality")) from_json(j.at("quality"), c.quality);
  } catch (const json::exception& e) {
    throw config_error("bad_value", e.what());
  }
  // The top-level seed and worker count win over section values.
  c.propagate();
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("io", "cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw config_error("bad_json", path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

std::string config_hash(const RunConfig& config) { return sha256_hex(to_json(config).dump()); }

// ---------------------------------------------------------------------------

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::vector<json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw data_error("bad_record", path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const fs::path& path, const std::vector<json>& records) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
}

std::vector<clean::RawDocument> read_raw_documents(const fs::path& path) {
  std::vector<clean::RawDocument> docs;
  std::set<std::string> seen;
  for (const auto& r : read_jsonl(path)) {
    try {
      clean::RawDocument d;
      d.id = r.at("id").is_string() ? r.at("id").get<std::string>() : r.at("id").dump();
      d.source = clean::source_from_string(r.value("source", std::string("web")));
      d.text = r.at("text").get<std::string>();
      if (!seen.insert(d.id).second) throw data_error("duplicate_id", "document id '" + d.id + "' repeats");
      docs.push_back(std::move(d));
    } catch (const json::exception& e) {
      throw data_error("bad_record", path.string() + ": " + e.what());
    }
  }
  return docs;
}

void write_clean_documents(const fs::path& path, const std::vector<clean::CleanDocument>& docs) {
  std::vector<json> records;
  records.reserve(docs.size());
  for (const auto& d : docs) {
    records.push_back({{"id", d.id}, {"source", std::string(clean::to_string(d.source))}, {"text", d.text}});
  }
  write_jsonl(path, records);
}

std::vector<clean::CleanDocument> read_clean_documents(const fs::path& path) {
  std::vector<clean::CleanDocument> out;
  for (auto& raw : read_raw_documents(path)) {
    out.push_back({std::move(raw.id), raw.source, std::move(raw.text), {}});
  }
  return out;
}

// ---------------------------------------------------------------------------

json Manifest::to_json() const {
  return {{"format", "slm-manifest"}, {"version", 1},
          {"tool_version", tool_version}, {"argv", argv},
          {"cwd", cwd},                   {"config_path", config_path},
          {"config_hash", config_hash},   {"seed", seed},
          {"workers", workers},           {"inputs", inputs},
          {"outputs", outputs}};
}

Manifest Manifest::from_json(const json& j) {
  if (j.value("format", std::string()) != "slm-manifest") throw data_error("bad_manifest", "not a manifest");
  if (j.value("version", 0) != 1) {
    throw data_error("unsupported_version", "manifest version " + j.value("version", json()).dump());
  }
  Manifest m;
  try {
    m.tool_version = j.at("tool_version").get<std::string>();
    m.argv = j.at("argv").get<std::vector<std::string>>();
    m.cwd = j.at("cwd").get<std::string>();
    m.config_path = j.at("config_path").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.workers = j.at("workers").get<int>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw data_error("bad_manifest", e.what());
  }
  return m;
}

void Manifest::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw data_error("io", "cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

Manifest Manifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io", "cannot open " + path.string());
  try {
    return from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw data_error("bad_manifest", path.string() + ": " + e.what());
  }
}

void add_digests(std::map<std::string, std::string>& into, const fs::path& path) {
  const fs::path abs = fs::absolute(path).lexically_normal();
  if (fs::is_directory(abs)) {
    for (const auto& e : fs::recursive_directory_iterator(abs)) {
      if (e.is_regular_file() && e.path().filename() != "manifest.json") {
        into[e.path().string()] = sha256_file(e.path().string());
      }
    }
  } else {
    into[abs.string()] = sha256_file(abs.string());
  }
}

fs::path artifact_path(const fs::path& path) {
  const char* root = std::getenv("SLM_ARTIFACT_ROOT");
  if (!root || !*root || path.is_absolute()) return path;
  return fs::path(root) / path;
}

}  // namespace slm
