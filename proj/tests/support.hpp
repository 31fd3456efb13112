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

// Helpers shared by the unit and acceptance tests.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "slm/model.hpp"
#include "slm/random.hpp"
#include "slm/tokenizer.hpp"
#include "slm/unicode.hpp"

namespace slm::testing {

#ifndef SLM_SOURCE_DIR
#define SLM_SOURCE_DIR "."
#endif

inline std::filesystem::path source_dir() { return SLM_SOURCE_DIR; }
inline std::filesystem::path toy_dir() { return source_dir() / "data" / "toy"; }

inline model::ModelConfig tiny_config(int layers = 2, int d_model = 16, int n_heads = 4,
                                      int kv_groups = 2, int vocab = 32, int max_seq = 16,
                                      int d_ff = 32) {
  model::ModelConfig c;
  c.n_layers = layers;
  c.d_model = d_model;
  c.n_heads = n_heads;
  c.head_dim = d_model / n_heads;
  c.kv_groups = kv_groups;
  c.d_ff = d_ff;
  c.vocab_size = vocab;
  c.max_seq = max_seq;
  c.dropout_p = 0.0;
  return c;
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<int> d(0, vocab - 1);
  std::vector<int> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

template <typename S>
model::Matrix<S> random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols,
                               double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  model::Matrix<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(d(rng));
  return m;
}

// Unique scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "slm") {
    static std::uint64_t counter = 0;
    const auto base = std::filesystem::temp_directory_path();
    std::random_device rd;
    path_ = base / (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename S>
bool bit_equal(const model::Parameters<S>& a, const model::Parameters<S>& b) {
  const auto ta = a.tensors();
  const auto tb = b.tensors();
  if (ta.size() != tb.size()) return false;
  for (size_t i = 0; i < ta.size(); ++i) {
    if (ta[i].name != tb[i].name || ta[i].rows != tb[i].rows || ta[i].cols != tb[i].cols) return false;
    if (std::memcmp(ta[i].data, tb[i].data, sizeof(S) * static_cast<size_t>(ta[i].size())) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace slm::testing
