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

#include "slm/tokenizer.hpp"

#include <algorithm>
#include <charconv>
#include <cstring>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "slm/error.hpp"
#include "slm/parallel.hpp"
#include "slm/unicode.hpp"

namespace slm::tok {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kUnknownPenalty = 10.0;
constexpr size_t kWordsPerTask = 256;
constexpr int kVocabFormatVersion = 1;

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw data_error("bad_vocab", "cannot parse number '" + std::string(s) + "'");
  }
  return v;
}

long parse_int(std::string_view s) {
  long v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw data_error("bad_vocab", "cannot parse integer '" + std::string(s) + "'");
  }
  return v;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape(std::string_view s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\' || i + 1 == s.size()) {
      out.push_back(s[i]);
      continue;
    }
    const char c = s[++i];
    out.push_back(c == 'n' ? '\n' : c == 't' ? '\t' : c);
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  size_t pos = 0;
  while (true) {
    const size_t tab = line.find('\t', pos);
    out.push_back(line.substr(pos, tab - pos));
    if (tab == std::string_view::npos) break;
    pos = tab + 1;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// PieceTable and lattice search

PieceTable::PieceTable(std::vector<std::u32string> pieces, std::vector<double> log_probs)
    : pieces_(std::move(pieces)), log_probs_(std::move(log_probs)) {
  if (pieces_.size() != log_probs_.size()) {
    throw data_error("bad_vocab", "piece/log-prob count mismatch");
  }
  index_.reserve(pieces_.size());
  for (size_t i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw data_error("bad_vocab", "empty piece");
    if (!index_.emplace(pieces_[i], static_cast<int>(i)).second) {
      throw data_error("bad_vocab", "duplicate piece '" + unicode::encode_utf8(pieces_[i]) + "'");
    }
    max_len_ = std::max(max_len_, pieces_[i].size());
  }
}

int PieceTable::find(std::u32string_view piece) const {
  auto it = index_.find(std::u32string(piece));
  return it == index_.end() ? -1 : it->second;
}

Segmentation viterbi(std::u32string_view word, const PieceTable& table,
                     double unknown_log_prob, int excluded) {
  const size_t n = word.size();
  std::vector<double> best(n + 1, kNegInf);
  std::vector<int> back_piece(n + 1, -2);
  std::vector<size_t> back_pos(n + 1, 0);
  best[0] = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (best[i] == kNegInf) continue;
    const size_t limit = std::min(table.max_len(), n - i);
    bool has_char = false;
    for (size_t len = 1; len <= limit; ++len) {
      const int id = table.find(word.substr(i, len));
      if (id < 0 || id == excluded) continue;
      if (len == 1) has_char = true;
      const double cand = best[i] + table.log_prob(id);
      if (cand > best[i + len]) {
        best[i + len] = cand;
        back_piece[i + len] = id;
        back_pos[i + len] = i;
      }
    }
    if (!has_char) {
      const double cand = best[i] + unknown_log_prob;
      if (cand > best[i + 1]) {
        best[i + 1] = cand;
        back_piece[i + 1] = -1;
        back_pos[i + 1] = i;
      }
    }
  }
  Segmentation out;
  out.score = best[n];
  for (size_t pos = n; pos > 0; pos = back_pos[pos]) out.pieces.push_back(back_piece[pos]);
  std::reverse(out.pieces.begin(), out.pieces.end());
  return out;
}

double log_partition(std::u32string_view word, const PieceTable& table) {
  const size_t n = word.size();
  std::vector<double> alpha(n + 1, kNegInf);
  alpha[0] = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (alpha[i] == kNegInf) continue;
    const size_t limit = std::min(table.max_len(), n - i);
    for (size_t len = 1; len <= limit; ++len) {
      const int id = table.find(word.substr(i, len));
      if (id >= 0) alpha[i + len] = log_add(alpha[i + len], alpha[i] + table.log_prob(id));
    }
  }
  return alpha[n];
}

// ---------------------------------------------------------------------------
// Trainer

void TrainerParams::validate() const {
  if (!(shrink_factor > 0.0 && shrink_factor < 1.0)) {
    throw config_error("bad_value", "shrink_factor must lie in (0, 1)");
  }
  if (max_piece_len < 1) throw config_error("bad_value", "max_piece_len must be >= 1");
  if (sub_iterations < 1) throw config_error("bad_value", "sub_iterations must be >= 1");
  if (seed_vocab_multiplier < 1.0) {
    throw config_error("bad_value", "seed_vocab_multiplier must be >= 1");
  }
  if (target_vocab <= kReservedIds) {
    throw config_error("vocab_too_small", "target_vocab must exceed the reserved ids");
  }
}

UnigramTrainer::UnigramTrainer(WordCounts words, TrainerParams params)
    : params_(params) {
  params_.validate();
  std::set<char32_t> alphabet;
  for (auto& [w, f] : words) {
    if (w.empty() || f <= 0) continue;
    alphabet.insert(w.begin(), w.end());
    words_.emplace_back(w, f);
  }
  if (words_.empty()) throw data_error("empty_corpus", "no words to train on");
  alphabet_.assign(alphabet.begin(), alphabet.end());
  if (static_cast<int>(alphabet_.size()) > target_pieces()) {
    throw config_error("vocab_too_small",
                       "target_vocab " + std::to_string(params_.target_vocab) +
                           " cannot hold the " + std::to_string(alphabet_.size()) +
                           "-character alphabet plus " + std::to_string(kReservedIds) +
                           " reserved ids");
  }
}

void UnigramTrainer::set_table(std::vector<std::u32string> pieces,
                               std::vector<double> log_probs) {
  table_ = PieceTable(std::move(pieces), std::move(log_probs));
  rebuild_lattices();
}

void UnigramTrainer::rebuild_lattices() {
  lattices_.assign(words_.size(), {});
  const size_t max_len = table_.max_len();
  for (size_t w = 0; w < words_.size(); ++w) {
    const std::u32string& word = words_[w].first;
    auto& edges = lattices_[w];
    for (size_t i = 0; i < word.size(); ++i) {
      const size_t limit = std::min(max_len, word.size() - i);
      for (size_t len = 1; len <= limit; ++len) {
        const int id = table_.find(std::u32string_view(word).substr(i, len));
        if (id >= 0) {
          edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i + len), id});
        }
      }
    }
  }
}

void UnigramTrainer::make_seed() {
  const size_t max_len = static_cast<size_t>(params_.max_piece_len);
  std::unordered_map<std::u32string, std::int64_t> counts;
  for (const auto& [word, freq] : words_) {
    for (size_t i = 0; i < word.size(); ++i) {
      const size_t limit = std::min(max_len, word.size() - i);
      for (size_t len = 1; len <= limit; ++len) counts[word.substr(i, len)] += freq;
    }
  }

  struct Candidate {
    std::u32string piece;
    double score;
  };
  std::vector<Candidate> chars, multi;
  for (auto& [piece, count] : counts) {
    const double score = static_cast<double>(count) * static_cast<double>(piece.size());
    if (piece.size() == 1) {
      chars.push_back({piece, score});
    } else if (count >= params_.min_substring_freq) {
      multi.push_back({piece, score});
    }
  }
  auto by_score = [](const Candidate& a, const Candidate& b) {
    return a.score != b.score ? a.score > b.score : a.piece < b.piece;
  };
  std::sort(chars.begin(), chars.end(), by_score);
  std::sort(multi.begin(), multi.end(), by_score);
  const auto seed_size = static_cast<size_t>(
      std::ceil(params_.seed_vocab_multiplier * static_cast<double>(target_pieces())));
  const size_t keep_multi = seed_size > chars.size() ? seed_size - chars.size() : 0;
  if (multi.size() > keep_multi) multi.resize(keep_multi);

  std::vector<std::u32string> pieces;
  std::vector<double> scores;
  double total = 0.0;
  for (const auto* list : {&chars, &multi}) {
    for (const auto& c : *list) {
      pieces.push_back(c.piece);
      scores.push_back(c.score);
      total += c.score;
    }
  }
  const double log_total = std::log(total);
  for (double& s : scores) s = std::log(s) - log_total;
  set_table(std::move(pieces), std::move(scores));
}

double UnigramTrainer::em_round() {
  if (table_.size() == 0) make_seed();
  const size_t n_tasks = (words_.size() + kWordsPerTask - 1) / kWordsPerTask;
  // Per-task contributions in word order, so the reduction below adds them in
  // the same order for any worker count.
  std::vector<std::vector<std::pair<int, double>>> contributions(n_tasks);
  std::vector<double> task_ll(n_tasks, 0.0);

  parallel_tasks(n_tasks, params_.workers, [&](size_t task) {
    const size_t begin = task * kWordsPerTask;
    const size_t end = std::min(words_.size(), begin + kWordsPerTask);
    std::vector<double> alpha, beta;
    for (size_t w = begin; w < end; ++w) {
      const size_t n = words_[w].first.size();
      const double freq = static_cast<double>(words_[w].second);
      const auto& edges = lattices_[w];
      alpha.assign(n + 1, kNegInf);
      beta.assign(n + 1, kNegInf);
      alpha[0] = 0.0;
      beta[n] = 0.0;
      // edges are sorted by begin position
      for (const Edge& e : edges) {
        alpha[e.end] = log_add(alpha[e.end], alpha[e.begin] + table_.log_prob(e.piece));
      }
      for (auto it = edges.rbegin(); it != edges.rend(); ++it) {
        beta[it->begin] = log_add(beta[it->begin], table_.log_prob(it->piece) + beta[it->end]);
      }
      const double z = alpha[n];
      task_ll[task] += freq * z;
      for (const Edge& e : edges) {
        const double p = std::exp(alpha[e.begin] + table_.log_prob(e.piece) + beta[e.end] - z);
        if (p > 0.0) contributions[task].emplace_back(e.piece, freq * p);
      }
    }
  });

  std::vector<double> expected(table_.size(), 0.0);
  double ll = 0.0;
  for (size_t t = 0; t < n_tasks; ++t) {
    for (const auto& [piece, value] : contributions[t]) expected[piece] += value;
    ll += task_ll[t];
  }

  // M-step: maximum-likelihood re-estimation. Multi-character pieces that
  // received no mass have probability zero and leave the table.
  std::vector<std::u32string> pieces;
  std::vector<double> log_probs;
  double total = 0.0;
  for (int i = 0; i < table_.size(); ++i) {
    if (expected[i] > 0.0 || is_char(i)) total += std::max(expected[i], 1e-300);
  }
  const double log_total = std::log(total);
  bool dropped = false;
  for (int i = 0; i < table_.size(); ++i) {
    if (expected[i] <= 0.0 && !is_char(i)) {
      dropped = true;
      continue;
    }
    pieces.push_back(table_.piece(i));
    log_probs.push_back(std::log(std::max(expected[i], 1e-300)) - log_total);
  }
  if (dropped) {
    set_table(std::move(pieces), std::move(log_probs));
  } else {
    table_.mutable_log_probs() = std::move(log_probs);
  }
  return ll;
}

double UnigramTrainer::log_likelihood() const {
  double ll = 0.0;
  std::vector<double> alpha;
  for (size_t w = 0; w < words_.size(); ++w) {
    const size_t n = words_[w].first.size();
    alpha.assign(n + 1, kNegInf);
    alpha[0] = 0.0;
    for (const Edge& e : lattices_[w]) {
      alpha[e.end] = log_add(alpha[e.end], alpha[e.begin] + table_.log_prob(e.piece));
    }
    ll += static_cast<double>(words_[w].second) * alpha[n];
  }
  return ll;
}

void UnigramTrainer::prune() {
  const int size = table_.size();
  int n_chars = 0;
  for (int i = 0; i < size; ++i) n_chars += is_char(i) ? 1 : 0;
  const int shrunk = static_cast<int>(std::floor(params_.shrink_factor * size));
  const int new_size = std::max(target_pieces(), shrunk);
  if (new_size >= size) return;

  // Viterbi counts over the corpus, and the fraction of word mass whose best
  // path uses each piece.
  std::vector<double> freq(size, 0.0), covered(size, 0.0);
  double word_mass = 0.0;
  const double unk = -std::numeric_limits<double>::max();
  std::vector<int> seen(size, -1);
  for (size_t w = 0; w < words_.size(); ++w) {
    const double f = static_cast<double>(words_[w].second);
    word_mass += f;
    const Segmentation best = viterbi(words_[w].first, table_, unk);
    for (int p : best.pieces) {
      freq[p] += f;
      if (seen[p] != static_cast<int>(w)) {
        seen[p] = static_cast<int>(w);
        covered[p] += f;
      }
    }
  }
  const double sum = std::accumulate(freq.begin(), freq.end(), 0.0);
  const double log_sum = std::log(sum);

  struct Candidate {
    int piece;
    double utility;
  };
  std::vector<Candidate> candidates;
  for (int i = 0; i < size; ++i) {
    if (is_char(i)) continue;
    double utility = 0.0;
    if (freq[i] > 0.0) {
      const Segmentation alt = viterbi(table_.piece(i), table_, unk, i);
      const double extra = freq[i] * static_cast<double>(alt.pieces.size() - 1);
      const double log_sum_alt = std::log(sum + extra);
      double log_prob_alt = 0.0;
      for (int n : alt.pieces) log_prob_alt += std::log(freq[n] + freq[i]) - log_sum_alt;
      const double log_prob_piece = std::log(freq[i]) - log_sum;
      utility = (covered[i] / word_mass) * (log_prob_piece - log_prob_alt);
    }
    candidates.push_back({i, utility});
  }
  std::sort(candidates.begin(), candidates.end(), [&](const Candidate& a, const Candidate& b) {
    if (a.utility != b.utility) return a.utility > b.utility;
    return table_.piece(a.piece) < table_.piece(b.piece);
  });
  const size_t keep = static_cast<size_t>(std::max(0, new_size - n_chars));
  if (candidates.size() > keep) candidates.resize(keep);

  std::vector<char> kept(size, 0);
  for (int i = 0; i < size; ++i) kept[i] = is_char(i) ? 1 : 0;
  for (const auto& c : candidates) kept[c.piece] = 1;

  std::vector<std::u32string> pieces;
  std::vector<double> log_probs;
  double log_total = kNegInf;
  for (int i = 0; i < size; ++i) {
    if (!kept[i]) continue;
    pieces.push_back(table_.piece(i));
    log_probs.push_back(table_.log_prob(i));
    log_total = log_add(log_total, table_.log_prob(i));
  }
  for (double& lp : log_probs) lp -= log_total;
  set_table(std::move(pieces), std::move(log_probs));
}

Vocabulary UnigramTrainer::finalize() const {
  std::vector<int> order(table_.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (table_.log_prob(a) != table_.log_prob(b)) return table_.log_prob(a) > table_.log_prob(b);
    return table_.piece(a) < table_.piece(b);
  });
  double log_total = kNegInf;
  for (int i : order) log_total = log_add(log_total, table_.log_prob(i));
  std::vector<std::pair<std::string, double>> pieces;
  pieces.reserve(order.size());
  for (int i : order) {
    pieces.emplace_back(unicode::encode_utf8(table_.piece(i)), table_.log_prob(i) - log_total);
  }
  return Vocabulary::from_pieces(pieces);
}

Vocabulary UnigramTrainer::train() {
  make_seed();
  // Each prune removes at least one piece, so this terminates.
  while (true) {
    for (int it = 0; it < params_.sub_iterations; ++it) em_round();
    if (table_.size() <= target_pieces()) break;
    prune();
  }
  return finalize();
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary Vocabulary::from_pieces(const std::vector<std::pair<std::string, double>>& pieces,
                                   std::optional<double> unknown_log_prob) {
  Vocabulary v;
  v.entries_.push_back({std::string(kBeginOfText), 0.0, TokenKind::kSpecial});
  v.entries_.push_back({std::string(kEndOfText), 0.0, TokenKind::kSpecial});
  v.entries_.push_back({std::string(kNewline), 0.0, TokenKind::kSpecial});
  double min_lp = 0.0;
  for (const auto& [s, lp] : pieces) min_lp = std::min(min_lp, lp);
  v.entries_.push_back({std::string(kUnknown), unknown_log_prob.value_or(min_lp - kUnknownPenalty),
                        TokenKind::kUnknown});
  for (const auto& [s, lp] : pieces) {
    if (!std::isfinite(lp)) throw data_error("bad_vocab", "non-finite log-prob for '" + s + "'");
    v.entries_.push_back({s, lp, TokenKind::kNormal});
  }
  v.rebuild();
  return v;
}

void Vocabulary::rebuild() {
  lookup_.clear();
  std::vector<std::u32string> pieces;
  std::vector<double> log_probs;
  for (int id = 0; id < size(); ++id) {
    const auto& e = entries_[id];
    if (!lookup_.emplace(e.surface, id).second) {
      throw data_error("bad_vocab", "duplicate vocabulary entry '" + e.surface + "'");
    }
    if (e.kind != TokenKind::kNormal) continue;
    if (id != kFirstPieceId + static_cast<int>(pieces.size())) {
      throw data_error("bad_vocab", "pieces must occupy contiguous ids from 4");
    }
    pieces.push_back(unicode::decode_utf8(e.surface));
    log_probs.push_back(e.log_prob);
  }
  num_pieces_ = static_cast<int>(pieces.size());
  table_ = std::make_shared<PieceTable>(std::move(pieces), std::move(log_probs));
}

int Vocabulary::num_specials() const {
  return static_cast<int>(std::count_if(entries_.begin(), entries_.end(), [](const VocabEntry& e) {
    return e.kind == TokenKind::kSpecial;
  }));
}

const VocabEntry& Vocabulary::entry(int id) const {
  if (id < 0 || id >= size()) {
    throw data_error("bad_id", "token id " + std::to_string(id) + " outside vocabulary of size " +
                                   std::to_string(size()));
  }
  return entries_[id];
}

std::optional<int> Vocabulary::find(std::string_view surface) const {
  auto it = lookup_.find(std::string(surface));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> Vocabulary::find_special(std::string_view surface) const {
  auto id = find(surface);
  if (id && entries_[*id].kind == TokenKind::kSpecial) return id;
  return std::nullopt;
}

std::vector<int> Vocabulary::special_ids() const {
  std::vector<int> ids;
  for (int id = 0; id < size(); ++id) {
    if (entries_[id].kind == TokenKind::kSpecial) ids.push_back(id);
  }
  return ids;
}

Vocabulary Vocabulary::extend_specials(const std::vector<std::string>& names) const {
  Vocabulary v = *this;
  std::set<std::string> fresh;
  for (const auto& name : names) {
    if (find(name) || !fresh.insert(name).second) {
      throw data_error("duplicate_special", "'" + name + "' is already in the vocabulary");
    }
    v.entries_.push_back({name, 0.0, TokenKind::kSpecial});
  }
  v.rebuild();
  return v;
}

bool Vocabulary::has_chat_specials() const {
  return find_special(kSystem) && find_special(kUser) && find_special(kAssistant);
}

std::string Vocabulary::serialize() const {
  std::ostringstream os;
  os << "#slm-vocab\t" << kVocabFormatVersion << "\n";
  os << "size\t" << size() << "\n";
  for (int id = 0; id < size(); ++id) {
    const auto& e = entries_[id];
    if (e.kind == TokenKind::kSpecial) os << "special\t" << id << "\t" << escape(e.surface) << "\n";
  }
  os << "unknown\t" << kUnknownId << "\t" << format_double(entries_[kUnknownId].log_prob) << "\n";
  os << "pieces\t" << num_pieces_ << "\n";
  for (int id = kFirstPieceId; id < kFirstPieceId + num_pieces_; ++id) {
    os << escape(entries_[id].surface) << "\t" << format_double(entries_[id].log_prob) << "\n";
  }
  return os.str();
}

Vocabulary Vocabulary::parse(std::string_view text) {
  std::vector<std::string_view> lines;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t nl = text.find('\n', pos);
    lines.push_back(text.substr(pos, nl - pos));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  size_t li = 0;
  auto next = [&]() -> std::vector<std::string_view> {
    if (li >= lines.size()) throw data_error("bad_vocab", "truncated vocabulary file");
    return split_tabs(lines[li++]);
  };
  auto header = next();
  if (header.size() != 2 || header[0] != "#slm-vocab") {
    throw data_error("bad_vocab", "missing vocabulary header");
  }
  if (parse_int(header[1]) != kVocabFormatVersion) {
    throw data_error("unsupported_version",
                     "vocabulary format version " + std::string(header[1]) + " is not supported");
  }
  auto size_line = next();
  if (size_line.size() != 2 || size_line[0] != "size") throw data_error("bad_vocab", "missing size");
  const long size = parse_int(size_line[1]);
  if (size < kReservedIds) throw data_error("bad_vocab", "vocabulary size too small");

  Vocabulary v;
  v.entries_.assign(static_cast<size_t>(size), VocabEntry{});
  std::vector<char> filled(static_cast<size_t>(size), 0);
  auto place = [&](long id, VocabEntry e) {
    if (id < 0 || id >= size || filled[id]) throw data_error("bad_vocab", "bad or repeated id");
    filled[id] = 1;
    v.entries_[id] = std::move(e);
  };
  std::vector<std::string_view> f;
  while (true) {
    f = next();
    if (f[0] != "special") break;
    if (f.size() != 3) throw data_error("bad_vocab", "malformed special line");
    place(parse_int(f[1]), {unescape(f[2]), 0.0, TokenKind::kSpecial});
  }
  if (f.size() != 3 || f[0] != "unknown") throw data_error("bad_vocab", "missing unknown line");
  place(parse_int(f[1]), {std::string(kUnknown), parse_double(f[2]), TokenKind::kUnknown});
  f = next();
  if (f.size() != 2 || f[0] != "pieces") throw data_error("bad_vocab", "missing piece count");
  const long n_pieces = parse_int(f[1]);
  for (long i = 0; i < n_pieces; ++i) {
    f = next();
    if (f.size() != 2) throw data_error("bad_vocab", "malformed piece line");
    place(kFirstPieceId + i, {unescape(f[0]), parse_double(f[1]), TokenKind::kNormal});
  }
  if (std::find(filled.begin(), filled.end(), 0) != filled.end()) {
    throw data_error("bad_vocab", "vocabulary ids are not fully covered");
  }
  if (v.entries_[kBeginId].surface != kBeginOfText || v.entries_[kEndId].surface != kEndOfText ||
      v.entries_[kNewlineId].surface != kNewline) {
    throw data_error("bad_vocab", "base specials are not at ids 0-2");
  }
  v.rebuild();
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("io", "cannot write " + path.string());
  out << serialize();
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("io", "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

bool operator==(const Vocabulary& a, const Vocabulary& b) {
  if (a.size() != b.size()) return false;
  for (int id = 0; id < a.size(); ++id) {
    const auto& x = a.entries_[id];
    const auto& y = b.entries_[id];
    if (x.surface != y.surface || x.kind != y.kind ||
        std::memcmp(&x.log_prob, &y.log_prob, sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Encoding

std::vector<std::u32string> pretokenize(std::string_view cleaned,
                                        const seg::Segmenter& segmenter) {
  std::vector<std::u32string> out;
  size_t pos = 0;
  while (pos <= cleaned.size()) {
    const size_t nl = cleaned.find('\n', pos);
    const std::string_view line = cleaned.substr(pos, nl - pos);
    std::vector<std::u32string> words;
    for (const std::string& segment : segmenter.segment(line)) {
      const std::u32string cps = unicode::decode_utf8(segment);
      size_t start = 0;
      for (size_t i = 1; i <= cps.size(); ++i) {
        if (i == cps.size() || (cps[i] == unicode::kMetaSpace && cps[i - 1] != unicode::kMetaSpace)) {
          words.push_back(cps.substr(start, i - start));
          start = i;
        }
      }
    }
    // A bare meta-space run becomes the prefix of the next word on the line.
    for (size_t i = 0; i < words.size(); ++i) {
      const bool bare = std::all_of(words[i].begin(), words[i].end(),
                                    [](char32_t c) { return c == unicode::kMetaSpace; });
      if (bare && i + 1 < words.size()) {
        words[i + 1] = words[i] + words[i + 1];
        continue;
      }
      out.push_back(std::move(words[i]));
    }
    if (nl == std::string_view::npos) break;
    out.push_back(U"\n");
    pos = nl + 1;
  }
  return out;
}

WordCounts count_words(std::span<const std::string> cleaned_texts,
                       const seg::Segmenter& segmenter) {
  WordCounts counts;
  for (const auto& text : cleaned_texts) {
    for (auto& word : pretokenize(text, segmenter)) {
      if (word != U"\n") ++counts[std::move(word)];
    }
  }
  return counts;
}

Tokenizer::Tokenizer(Vocabulary vocab, clean::CleaningConfig cleaning, seg::Lexicon lexicon)
    : vocab_(std::move(vocab)),
      cleaner_(std::make_shared<clean::TextCleaner>(std::move(cleaning))),
      segmenter_(std::make_shared<seg::LongestMatchSegmenter>(std::move(lexicon))) {}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  return encode_cleaned(cleaner_->clean(text));
}

std::vector<int> Tokenizer::encode_cleaned(std::string_view cleaned) const {
  std::vector<int> ids;
  const double unk_lp = vocab_.entry(kUnknownId).log_prob;
  for (const auto& word : pretokenize(cleaned, *segmenter_)) {
    if (word == U"\n") {
      ids.push_back(kNewlineId);
      continue;
    }
    for (int p : viterbi(word, vocab_.table(), unk_lp).pieces) {
      ids.push_back(p < 0 ? kUnknownId : vocab_.piece_id(p));
    }
  }
  return ids;
}

std::string decode(std::span<const int> ids, const Vocabulary& vocab,
                   const DecodeOptions& options) {
  std::string out;
  for (int id : ids) {
    const VocabEntry& e = vocab.entry(id);
    if (e.kind == TokenKind::kSpecial) {
      if (id == kNewlineId) {
        out.push_back('\n');
      } else if (!options.strip_specials) {
        out += e.surface;
      }
      continue;
    }
    if (!options.restore_whitespace) {
      out += e.surface;
      continue;
    }
    std::string_view s = e.surface;
    size_t pos = 0;
    while (true) {
      const size_t hit = s.find(unicode::kMetaSpaceUtf8, pos);
      out.append(s.substr(pos, hit - pos));
      if (hit == std::string_view::npos) break;
      out.push_back(' ');
      pos = hit + unicode::kMetaSpaceUtf8.size();
    }
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids, const DecodeOptions& options) const {
  return tok::decode(ids, vocab_, options);
}

}  // namespace slm::tok
