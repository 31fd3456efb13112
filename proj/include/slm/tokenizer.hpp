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

// Unigram subword tokenizer.
//
// Id layout of a vocabulary:
//   0 <|begin_of_text|>, 1 <|end_of_text|>, 2 "\n", 3 <unk>, 4.. pieces,
// followed by any specials appended with extend_specials (the chat markers
// land on 32768..32770 for a 32768-entry base vocabulary).

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "slm/corpus_clean.hpp"
#include "slm/segmenter.hpp"

namespace slm::tok {

inline constexpr std::string_view kBeginOfText = "<|begin_of_text|>";
inline constexpr std::string_view kEndOfText = "<|end_of_text|>";
inline constexpr std::string_view kNewline = "\n";
inline constexpr std::string_view kSystem = "<|system|>";
inline constexpr std::string_view kUser = "<|user|>";
inline constexpr std::string_view kAssistant = "<|assistant|>";
inline constexpr std::string_view kUnknown = "<unk>";

inline constexpr int kBeginId = 0;
inline constexpr int kEndId = 1;
inline constexpr int kNewlineId = 2;
inline constexpr int kUnknownId = 3;
inline constexpr int kFirstPieceId = 4;

// Number of ids taken by the base specials and <unk>.
inline constexpr int kReservedIds = 4;

// ---------------------------------------------------------------------------
// Lattice primitives over a piece table, shared by the trainer and encoder.

class PieceTable {
 public:
  PieceTable() = default;
  PieceTable(std::vector<std::u32string> pieces, std::vector<double> log_probs);

  int size() const { return static_cast<int>(pieces_.size()); }
  const std::u32string& piece(int i) const { return pieces_[i]; }
  double log_prob(int i) const { return log_probs_[i]; }
  const std::vector<std::u32string>& pieces() const { return pieces_; }
  const std::vector<double>& log_probs() const { return log_probs_; }
  std::vector<double>& mutable_log_probs() { return log_probs_; }
  size_t max_len() const { return max_len_; }
  // -1 when absent.
  int find(std::u32string_view piece) const;

 private:
  std::vector<std::u32string> pieces_;
  std::vector<double> log_probs_;
  std::unordered_map<std::u32string, int> index_;
  size_t max_len_ = 0;
};

struct Segmentation {
  std::vector<int> pieces;  // table indices, or -1 for an unknown character
  double score = 0.0;       // sum of log-probabilities along the path
};

// Max-score segmentation. Characters with no covering piece become a
// single-character unknown edge scored `unknown_log_prob`. `excluded` removes
// one table entry from the lattice (used for pruning alternatives).
Segmentation viterbi(std::u32string_view word, const PieceTable& table,
                     double unknown_log_prob, int excluded = -1);

// log sum over all segmentations of exp(score); -inf if none exists.
double log_partition(std::u32string_view word, const PieceTable& table);

// ---------------------------------------------------------------------------
// Training

using WordCounts = std::map<std::u32string, std::int64_t>;

struct TrainerParams {
  // Final vocabulary size including specials and <unk>.
  int target_vocab = 32768;
  double shrink_factor = 0.75;
  int max_piece_len = 16;
  int sub_iterations = 8;
  double seed_vocab_multiplier = 10.0;
  std::int64_t min_substring_freq = 2;
  int workers = 1;

  void validate() const;
};

class Vocabulary;

class UnigramTrainer {
 public:
  UnigramTrainer(WordCounts words, TrainerParams params);

  // Seed pieces: every character plus the highest freq*length substrings
  // (length <= max_piece_len, frequency >= min_substring_freq).
  void make_seed();
  // One EM round. Returns the corpus log-likelihood under the model used in
  // the E-step (before re-estimation).
  double em_round();
  // Drops the lowest-utility multi-character pieces down to
  // max(target, shrink_factor * size). Characters are never pruned.
  void prune();
  // Corpus log-likelihood under the current model.
  double log_likelihood() const;
  Vocabulary finalize() const;

  // make_seed, then alternate sub_iterations EM rounds with pruning until the
  // piece count fits the target.
  Vocabulary train();

  const PieceTable& table() const { return table_; }
  int target_pieces() const { return params_.target_vocab - kReservedIds; }
  size_t alphabet_size() const { return alphabet_.size(); }

 private:
  struct Edge {
    std::uint32_t begin;
    std::uint32_t end;
    int piece;
  };
  void set_table(std::vector<std::u32string> pieces, std::vector<double> log_probs);
  void rebuild_lattices();
  bool is_char(int piece) const { return table_.piece(piece).size() == 1; }

  std::vector<std::pair<std::u32string, std::int64_t>> words_;
  TrainerParams params_;
  std::vector<char32_t> alphabet_;
  PieceTable table_;
  std::vector<std::vector<Edge>> lattices_;
};

// ---------------------------------------------------------------------------
// Vocabulary

enum class TokenKind : std::uint8_t { kNormal, kUnknown, kSpecial };

struct VocabEntry {
  std::string surface;
  double log_prob = 0.0;
  TokenKind kind = TokenKind::kNormal;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  // Lays out the base specials, <unk> and `pieces` (in the given order).
  // `unknown_log_prob` defaults to min(log_prob) - 10.
  static Vocabulary from_pieces(const std::vector<std::pair<std::string, double>>& pieces,
                                std::optional<double> unknown_log_prob = std::nullopt);

  int size() const { return static_cast<int>(entries_.size()); }
  int num_pieces() const { return num_pieces_; }
  int num_specials() const;
  const VocabEntry& entry(int id) const;
  const std::string& surface(int id) const { return entry(id).surface; }
  bool is_special(int id) const { return entry(id).kind == TokenKind::kSpecial; }
  // Special or piece with this exact surface.
  std::optional<int> find(std::string_view surface) const;
  std::optional<int> find_special(std::string_view surface) const;
  std::vector<int> special_ids() const;

  // Appends specials at the end of the id space; existing ids are unchanged.
  // Throws duplicate_special if any name is already present.
  Vocabulary extend_specials(const std::vector<std::string>& names) const;
  bool has_chat_specials() const;

  const PieceTable& table() const { return *table_; }
  int piece_id(int table_index) const { return kFirstPieceId + table_index; }

  std::string serialize() const;
  static Vocabulary parse(std::string_view text);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary& a, const Vocabulary& b);

 private:
  void rebuild();

  std::vector<VocabEntry> entries_;
  std::unordered_map<std::string, int> lookup_;
  std::shared_ptr<const PieceTable> table_;
  int num_pieces_ = 0;
};

bool operator==(const Vocabulary& a, const Vocabulary& b);

// ---------------------------------------------------------------------------
// Encoding pipeline

// Splits cleaned text into pre-tokenized words. A U+2581 always starts a new
// word and is kept as that word's prefix; line breaks come back as "\n"
// entries. Concatenation of the result equals `cleaned`.
std::vector<std::u32string> pretokenize(std::string_view cleaned,
                                        const seg::Segmenter& segmenter);

WordCounts count_words(std::span<const std::string> cleaned_texts,
                       const seg::Segmenter& segmenter);

struct DecodeOptions {
  // Drop begin/end/chat markers; "\n" is always rendered as a line break.
  bool strip_specials = false;
  // Render U+2581 as an ASCII space.
  bool restore_whitespace = true;
};

class Tokenizer {
 public:
  Tokenizer(Vocabulary vocab, clean::CleaningConfig cleaning, seg::Lexicon lexicon);

  // clean -> segment -> split on U+2581 -> per-word Viterbi.
  std::vector<int> encode(std::string_view text) const;
  // Skips the cleaning stage; `cleaned` must already be clean_text output.
  std::vector<int> encode_cleaned(std::string_view cleaned) const;
  std::string decode(std::span<const int> ids, const DecodeOptions& options = {}) const;

  const Vocabulary& vocab() const { return vocab_; }
  const clean::TextCleaner& cleaner() const { return *cleaner_; }
  const seg::Segmenter& segmenter() const { return *segmenter_; }

 private:
  Vocabulary vocab_;
  std::shared_ptr<const clean::TextCleaner> cleaner_;
  std::shared_ptr<const seg::Segmenter> segmenter_;
};

std::string decode(std::span<const int> ids, const Vocabulary& vocab,
                   const DecodeOptions& options = {});

}  // namespace slm::tok
