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

#include "slm/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "slm/strings.hpp"

namespace slm::analysis {

namespace fs = std::filesystem;

constexpr const char* kMatrixMagic = "#slm-matrix";
constexpr int kMatrixVersion = 1;

template <typename S>
std::vector<AnalogyHit> analogy_ids(const model::Matrix<S>& e, int a, int b, int c, int k) {
  const int n = static_cast<int>(e.rows());
  for (int id : {a, b, c}) {
    if (id < 0 || id >= n) throw data_error("unknown_token", "token id " + std::to_string(id) + " out of range");
  }
  if (k < 1) throw config_error("invalid_k", "k must be >= 1");
  const Eigen::VectorXd query = (e.row(a).template cast<double>() - e.row(b).template cast<double>() +
                                 e.row(c).template cast<double>())
                                    .transpose();
  std::vector<AnalogyHit> hits;
  hits.reserve(e.rows());
  for (int id = 0; id < n; ++id) {
    if (id == a || id == b || id == c) continue;
    hits.push_back({id, "", cosine(e.row(id).transpose(), query)});
  }
  const size_t top = std::min<size_t>(static_cast<size_t>(k), hits.size());
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(top), hits.end(),
                    [](const AnalogyHit& x, const AnalogyHit& y) {
                      if (x.cosine != y.cosine) return x.cosine > y.cosine;
                      return x.id < y.id;
                    });
  hits.resize(top);
  return hits;
}

template <typename S>
std::vector<AnalogyHit> analogy(const model::Matrix<S>& e, const tok::Vocabulary& vocab,
                                const std::string& a, const std::string& b, const std::string& c,
                                int k) {
  if (e.rows() != vocab.size()) {
    throw data_error("shape_mismatch", "embedding rows differ from vocabulary size");
  }
  const auto lookup = [&](const std::string& s) {
    if (const auto id = vocab.find(s)) return *id;
    std::vector<std::string> surfaces;
    surfaces.reserve(vocab.size());
    for (int i = 0; i < vocab.size(); ++i) surfaces.push_back(vocab.surface(i));
    std::string near;
    for (const auto& n : nearest_strings(s, surfaces, 5)) near += (near.empty() ? "" : ", ") + escape_line(n);
    throw data_error("unknown_token", "'" + s + "' is not in the vocabulary; nearest: " + near);
  };
  const int ia = lookup(a), ib = lookup(b), ic = lookup(c);
  auto hits = analogy_ids(e, ia, ib, ic, k);
  for (auto& h : hits) h.surface = vocab.surface(h.id);
  return hits;
}

template <typename S>
void write_matrix(const fs::path& path, const model::Matrix<S>& m, int heads) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + path.string());
  out << kMatrixMagic << '\t' << kMatrixVersion << '\n'
      << "rows\t" << m.rows() << '\n'
      << "cols\t" << m.cols() << '\n'
      << "dtype\t" << model::dtype_name<S>() << '\n';
  if (heads > 0) out << "heads\t" << heads << '\n';
  out << '\n';
  out.write(reinterpret_cast<const char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(S)));
  if (!out) throw data_error("io", "write failed for " + path.string());
}

template <typename S>
model::Matrix<S> read_matrix(const fs::path& path, MatrixHeader* header_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != std::string(kMatrixMagic) + "\t" + std::to_string(kMatrixVersion)) {
    if (line.rfind(kMatrixMagic, 0) == 0) throw data_error("unsupported_version", line);
    throw data_error("bad_magic", path.string() + " is not a matrix file");
  }
  MatrixHeader h;
  while (std::getline(in, line) && !line.empty()) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw data_error("bad_header", line);
    const std::string key = line.substr(0, tab), value = line.substr(tab + 1);
    if (key == "rows") h.rows = std::stoll(value);
    else if (key == "cols") h.cols = std::stoll(value);
    else if (key == "dtype") h.dtype = value;
    else if (key == "heads") h.heads = std::stoi(value);
    else throw data_error("bad_header", "unknown matrix header key " + key);
  }
  if (h.dtype != model::dtype_name<S>()) {
    throw data_error("dtype_mismatch", "matrix holds " + h.dtype + ", requested " + model::dtype_name<S>());
  }
  model::Matrix<S> m(h.rows, h.cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(S)));
  if (in.gcount() != static_cast<std::streamsize>(m.size() * sizeof(S))) {
    throw data_error("truncated", path.string() + " payload is truncated");
  }
  if (header_out) *header_out = h;
  return m;
}

TokenFilter token_filter_from_string(const std::string& name) {
  if (name == "all") return TokenFilter::kAll;
  if (name == "specials") return TokenFilter::kSpecials;
  if (name == "pieces") return TokenFilter::kPieces;
  if (name == "ids") return TokenFilter::kIds;
  throw config_error("unknown_filter", "token filter must be all, specials, pieces or ids");
}

std::vector<int> select_tokens(const tok::Vocabulary& vocab, TokenFilter filter,
                               std::span<const int> ids) {
  std::vector<int> out;
  switch (filter) {
    case TokenFilter::kAll:
      for (int i = 0; i < vocab.size(); ++i) out.push_back(i);
      break;
    case TokenFilter::kSpecials:
      out = vocab.special_ids();
      break;
    case TokenFilter::kPieces:
      for (int i = 0; i < vocab.size(); ++i) {
        if (vocab.entry(i).kind == tok::TokenKind::kNormal) out.push_back(i);
      }
      break;
    case TokenFilter::kIds:
      for (int id : ids) {
        if (id < 0 || id >= vocab.size()) throw data_error("bad_id", "token id " + std::to_string(id));
        out.push_back(id);
      }
      break;
  }
  return out;
}

template <typename S>
EmbeddingExport export_embeddings(const model::Parameters<S>& params, const tok::Vocabulary& vocab,
                                  TokenFilter filter, std::span<const int> ids) {
  if (params.config.vocab_size != vocab.size()) {
    throw data_error("shape_mismatch", "model vocabulary (" + std::to_string(params.config.vocab_size) +
                                           ") differs from tokenizer (" + std::to_string(vocab.size()) + ")");
  }
  EmbeddingExport e;
  e.ids = select_tokens(vocab, filter, ids);
  if (e.ids.empty()) throw data_error("empty_selection", "token filter selected nothing");
  e.matrix.resize(static_cast<Eigen::Index>(e.ids.size()), params.config.d_model);
  for (size_t r = 0; r < e.ids.size(); ++r) {
    e.matrix.row(static_cast<Eigen::Index>(r)) = params.token_embedding.row(e.ids[r]).template cast<double>();
    e.labels.push_back(vocab.surface(e.ids[r]));
  }
  return e;
}

void write_embedding_export(const fs::path& stem, const EmbeddingExport& e) {
  fs::path mat = stem;
  mat += ".mat";
  fs::path labels = stem;
  labels += ".labels";
  write_matrix(mat, e.matrix);
  std::ofstream out(labels, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + labels.string());
  for (size_t i = 0; i < e.ids.size(); ++i) out << e.ids[i] << '\t' << escape_line(e.labels[i]) << '\n';
}

template <typename S>
AttentionExport export_attention(const model::Parameters<S>& params, std::span<const int> tokens) {
  const auto& c = params.config;
  if (static_cast<int>(tokens.size()) > c.max_seq) {
    throw data_error("sequence_too_long", std::to_string(tokens.size()) + " tokens exceed max_seq " +
                                              std::to_string(c.max_seq));
  }
  model::ForwardOptions<S> fo;
  fo.keep_attention = true;
  const auto out = model::forward<S>(params, tokens, fo);
  AttentionExport e;
  e.n_heads = c.n_heads;
  e.seq = static_cast<int>(tokens.size());
  e.tokens.assign(tokens.begin(), tokens.end());
  for (int i = 0; i < e.seq; ++i) {
    if (tokens[i] == tok::kEndId) e.end_positions.push_back(i);
  }
  for (const auto& layer : out.attention) {
    model::Matrix<double> m(static_cast<Eigen::Index>(c.n_heads) * e.seq, e.seq);
    for (int h = 0; h < c.n_heads; ++h) {
      m.middleRows(static_cast<Eigen::Index>(h) * e.seq, e.seq) = layer[h].template cast<double>();
    }
    e.maps.push_back(std::move(m));
  }
  return e;
}

void write_attention_export(const fs::path& dir, const AttentionExport& e) {
  fs::create_directories(dir);
  for (size_t l = 0; l < e.maps.size(); ++l) {
    char name[32];
    std::snprintf(name, sizeof(name), "layer-%02zu.mat", l);
    write_matrix(dir / name, e.maps[l], e.n_heads);
  }
  nlohmann::json meta = {{"format", "slm-attention"}, {"version", 1},
                         {"layers", e.maps.size()},    {"heads", e.n_heads},
                         {"seq", e.seq},               {"tokens", e.tokens},
                         {"end_positions", e.end_positions}};
  std::ofstream out(dir / "meta.json");
  if (!out) throw data_error("io", "cannot write " + (dir / "meta.json").string());
  out << meta.dump(2) << '\n';
}

#define SLM_INSTANTIATE(S)                                                                     \
  template std::vector<AnalogyHit> analogy_ids<S>(const model::Matrix<S>&, int, int, int, int); \
  template std::vector<AnalogyHit> analogy<S>(const model::Matrix<S>&, const tok::Vocabulary&, \
                                              const std::string&, const std::string&,          \
                                              const std::string&, int);                        \
  template void write_matrix<S>(const fs::path&, const model::Matrix<S>&, int);                \
  template model::Matrix<S> read_matrix<S>(const fs::path&, MatrixHeader*);                    \
  template EmbeddingExport export_embeddings<S>(const model::Parameters<S>&,                   \
                                                const tok::Vocabulary&, TokenFilter,           \
                                                std::span<const int>);                         \
  template AttentionExport export_attention<S>(const model::Parameters<S>&, std::span<const int>);

SLM_INSTANTIATE(float)
SLM_INSTANTIATE(double)
#undef SLM_INSTANTIATE

}  // namespace slm::analysis
