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

// Embedding analogies and exports of embeddings and attention maps.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slm/model.hpp"
#include "slm/tokenizer.hpp"

namespace slm::analysis {

// Cosine similarity; 0 when either vector is zero.
template <typename DA, typename DB>
double cosine(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  const double na = a.template cast<double>().norm();
  const double nb = b.template cast<double>().norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.template cast<double>().dot(b.template cast<double>()) / (na * nb);
}

struct AnalogyHit {
  int id = 0;
  std::string surface;
  double cosine = 0.0;
};

// Ranks every row except a, b and c by cosine to E[a] - E[b] + E[c];
// equal scores are ordered by id.
template <typename Scalar>
std::vector<AnalogyHit> analogy_ids(const model::Matrix<Scalar>& embeddings, int a, int b, int c,
                                    int k);

// Surface-form front end. Unknown surfaces raise unknown_token with the
// closest vocabulary entries in the message.
template <typename Scalar>
std::vector<AnalogyHit> analogy(const model::Matrix<Scalar>& embeddings,
                                const tok::Vocabulary& vocab, const std::string& a,
                                const std::string& b, const std::string& c, int k);

// ---------------------------------------------------------------------------
// Matrix files: "#slm-matrix\t1", "rows\tR", "cols\tC", "dtype\tf32|f64",
// optional "heads\tH", a blank line, then the row-major payload.

template <typename Scalar>
void write_matrix(const std::filesystem::path& path, const model::Matrix<Scalar>& m,
                  int heads = 0);

struct MatrixHeader {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::string dtype;
  int heads = 0;
};

template <typename Scalar>
model::Matrix<Scalar> read_matrix(const std::filesystem::path& path,
                                  MatrixHeader* header = nullptr);

enum class TokenFilter { kAll, kSpecials, kPieces, kIds };

TokenFilter token_filter_from_string(const std::string& name);

// Ids selected by a filter, ascending. kIds takes `ids` as given.
std::vector<int> select_tokens(const tok::Vocabulary& vocab, TokenFilter filter,
                               std::span<const int> ids = {});

struct EmbeddingExport {
  model::Matrix<double> matrix;  // one token_embedding row per selected id
  std::vector<int> ids;
  std::vector<std::string> labels;
};

template <typename Scalar>
EmbeddingExport export_embeddings(const model::Parameters<Scalar>& params,
                                  const tok::Vocabulary& vocab, TokenFilter filter,
                                  std::span<const int> ids = {});

// `<stem>.mat` plus `<stem>.labels` (one "id\tescaped surface" line per row).
void write_embedding_export(const std::filesystem::path& stem, const EmbeddingExport& e);

struct AttentionExport {
  // maps[l] is [n_heads * seq x seq]; head h occupies rows [h*seq, (h+1)*seq).
  std::vector<model::Matrix<double>> maps;
  int n_heads = 0;
  int seq = 0;
  std::vector<int> tokens;
  std::vector<int> end_positions;  // positions holding <|end_of_text|>
};

// Dropout is always off here.
template <typename Scalar>
AttentionExport export_attention(const model::Parameters<Scalar>& params,
                                 std::span<const int> tokens);

// `layer-XX.mat` per layer and `meta.json` in `dir`.
void write_attention_export(const std::filesystem::path& dir, const AttentionExport& e);

}  // namespace slm::analysis
