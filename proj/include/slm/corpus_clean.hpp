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

// Text normalization, document filtering and corpus deduplication.
//
// clean_text applies ten rules in a pinned order:
//   1. full-width period/comma -> 。/、 (and CR/CRLF -> LF)
//   2. NFKC
//   3. hyphen / chōonpu / tilde variants
//   4. "..." -> "…", "°C" -> "℃"
//   5. phone numbers, e-mail addresses
//   6. URLs, @accounts, #tags
//   7. symbol unification map
//   8. delete characters outside the whitelist
//   9. squeeze runs longer than max_repeat_run
//  10. horizontal white-space runs -> one U+2581
// Rule 1 must precede NFKC, which would otherwise fold "．" to ".", and the
// restorations of rule 4 must follow it, since NFKC decomposes "…" and "℃".
// The pipeline is iterated until its output is a fixed point, so
// clean_text(clean_text(x)) == clean_text(x) holds even when deletions in
// rules 5-8 bring new matches together.

#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace slm::clean {

enum class Source { kWiki, kWeb, kTextbook, kSynthetic };

std::string_view to_string(Source source);
Source source_from_string(std::string_view name);

struct RawDocument {
  std::string id;
  Source source = Source::kWeb;
  std::string text;
};

struct CodepointRange {
  char32_t lo;
  char32_t hi;
};

using ReplacementList = std::vector<std::pair<std::string, std::string>>;

struct CleaningConfig {
  std::vector<CodepointRange> charset_whitelist;
  std::vector<std::string> blocked_terms;
  int max_repeat_run = 3;
  double incomplete_sentence_threshold = 0.5;
  // Rule 3 table (hyphen, chōonpu and tilde spellings).
  ReplacementList variant_map;
  // Rule 7 table. Pairs are applied in order.
  ReplacementList symbol_unification_map;
  // ICU regular expressions for rules 5 and 6.
  std::vector<std::string> pii_patterns;
  std::vector<std::string> web_patterns;
  std::string pattern_version;
  // Sentences whose normalized form occurs more than this many times in the
  // corpus are removed by dedup_corpus.
  int sentence_repeat_limit = 2;

  // Shipped defaults. The term lists and unification tables are placeholders
  // meant to be replaced by curated data.
  static CleaningConfig defaults();

  // Throws config errors for max_repeat_run < 1, threshold outside [0,1],
  // inverted ranges, or a cyclic unification map.
  void validate() const;

  bool is_whitelisted(char32_t cp) const;
};

using RuleCounts = std::map<std::string, std::int64_t>;

struct CleanDocument {
  std::string id;
  Source source = Source::kWeb;
  std::string text;
  RuleCounts rule_counts;
};

enum class RejectReason { kBlockedTerm, kIncompleteSentences, kEmpty, kDuplicate };

std::string_view to_string(RejectReason reason);

struct FilterReport {
  std::int64_t input = 0;
  std::int64_t kept = 0;
  std::map<std::string, std::int64_t> rejected;
  std::int64_t bytes_in = 0;
  std::int64_t bytes_out = 0;
  // Bytes dropped per cause: whole rejected documents by reason name, plus
  // "duplicate_sentence" for sentence-level removal.
  std::map<std::string, std::int64_t> bytes_removed;
  std::int64_t sentences_removed = 0;

  void reject(RejectReason reason, std::int64_t bytes);
  void merge(const FilterReport& other);
  // kept + sum(rejected) == input and bytes_out + sum(bytes_removed) == bytes_in.
  bool balanced() const;
  std::string to_text() const;
};

// Compiled form of a CleaningConfig. Immutable and safe to share across
// threads after construction.
class TextCleaner {
 public:
  explicit TextCleaner(CleaningConfig config);
  ~TextCleaner();
  TextCleaner(TextCleaner&&) noexcept;
  TextCleaner& operator=(TextCleaner&&) noexcept;

  std::string clean(std::string_view text, RuleCounts* counts = nullptr) const;
  const CleaningConfig& config() const { return config_; }
  // Blocked terms passed through clean(), so they match cleaned text.
  const std::vector<std::string>& cleaned_blocked_terms() const {
    return cleaned_blocked_terms_;
  }

 private:
  struct Patterns;
  std::string run_pass(std::string_view text, RuleCounts* counts) const;

  CleaningConfig config_;
  std::unique_ptr<Patterns> patterns_;
  std::vector<std::string> cleaned_blocked_terms_;
};

std::string clean_text(std::string_view text, const CleaningConfig& config);

CleanDocument clean_document(const RawDocument& doc, const TextCleaner& cleaner);

std::optional<RejectReason> filter_document(const CleanDocument& doc,
                                            const TextCleaner& cleaner);

struct DedupResult {
  std::vector<CleanDocument> docs;
  FilterReport report;
};

// Exact-hash document dedup (first occurrence wins), then removal of every
// sentence whose normalized form occurs more than `sentence_repeat_limit`
// times across the surviving documents. Documents emptied by the second pass
// are rejected as kEmpty.
DedupResult dedup_corpus(std::vector<CleanDocument> docs,
                         int sentence_repeat_limit = 2);

// Splits text into sentences; each piece keeps its terminator and a trailing
// line break. Concatenating the pieces gives back the input.
std::vector<std::string_view> split_sentences(std::string_view text);

// Individual rules, exposed for order-regression fixtures.
namespace rules {
std::string fullwidth_punctuation(std::string_view text, std::int64_t* n = nullptr);
std::string nfkc(std::string_view text, std::int64_t* n = nullptr);
std::string replace_all(std::string_view text, const ReplacementList& pairs,
                        std::int64_t* n = nullptr);
std::string restore_symbols(std::string_view text, std::int64_t* n = nullptr);
std::string squeeze_runs(std::string_view text, int max_run, std::int64_t* n = nullptr);
std::string to_meta_space(std::string_view text, std::int64_t* n = nullptr);
}  // namespace rules

}  // namespace slm::clean
