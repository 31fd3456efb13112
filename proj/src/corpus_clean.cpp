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

#include "slm/corpus_clean.hpp"

#include <unicode/normalizer2.h>
#include <unicode/regex.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "slm/error.hpp"
#include "slm/unicode.hpp"

namespace slm::clean {
namespace {

constexpr int kMaxPasses = 8;

const icu::Normalizer2& nfkc_instance() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status) || n == nullptr) {
    throw config_error("icu", "NFKC normalizer unavailable");
  }
  return *n;
}

std::string to_utf8(const icu::UnicodeString& s) {
  std::string out;
  s.toUTF8String(out);
  return out;
}

void bump(RuleCounts* counts, const char* rule, std::int64_t n) {
  if (counts != nullptr && n > 0) (*counts)[rule] += n;
}

bool is_terminal(char32_t cp) {
  return cp == U'。' || cp == U'！' || cp == U'？' || cp == U'…' ||
         cp == U'!' || cp == U'?';
}

bool is_closing(char32_t cp) {
  return cp == U'」' || cp == U'』' || cp == U')' || cp == U'）' ||
         cp == U']' || cp == U'】' || cp == U'"' || cp == U'\'';
}

std::u32string_view trim_space(std::u32string_view s) {
  auto blank = [](char32_t c) {
    return c == unicode::kMetaSpace || c == U'\n' || unicode::is_horizontal_space(c);
  };
  while (!s.empty() && blank(s.front())) s.remove_prefix(1);
  while (!s.empty() && blank(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string_view to_string(Source source) {
  switch (source) {
    case Source::kWiki: return "wiki";
    case Source::kWeb: return "web";
    case Source::kTextbook: return "textbook";
    case Source::kSynthetic: return "synthetic";
  }
  return "web";
}

Source source_from_string(std::string_view name) {
  if (name == "wiki") return Source::kWiki;
  if (name == "web") return Source::kWeb;
  if (name == "textbook") return Source::kTextbook;
  if (name == "synthetic") return Source::kSynthetic;
  throw data_error("bad_source", "unknown document source '" + std::string(name) + "'");
}

std::string_view to_string(RejectReason reason) {
  switch (reason) {
    case RejectReason::kBlockedTerm: return "blocked_term";
    case RejectReason::kIncompleteSentences: return "incomplete_sentences";
    case RejectReason::kEmpty: return "empty";
    case RejectReason::kDuplicate: return "duplicate";
  }
  return "empty";
}

CleaningConfig CleaningConfig::defaults() {
  CleaningConfig c;
  c.charset_whitelist = {
      {U'0', U'9'}, {U'A', U'Z'}, {U'a', U'z'},
      {U'!', U'!'}, {U'"', U'"'}, {U'%', U'%'}, {U'&', U'&'}, {U'\'', U'+'},
      {U',', U'/'}, {U':', U';'}, {U'<', U'?'}, {U'[', U'['}, {U']', U'_'},
      {U'~', U'~'},
      {0x00B0, 0x00B1},  // ° ±
      {0x00D7, 0x00D7}, {0x00F7, 0x00F7},
      {0x0391, 0x03A1}, {0x03A3, 0x03A9}, {0x03B1, 0x03C9},  // Greek
      {0x2026, 0x2026},  // …
      {0x203B, 0x203B},  // ※
      {0x2103, 0x2103},  // ℃
      {0x2190, 0x2193},  // arrows
      {0x25A0, 0x25A1}, {0x25B2, 0x25B3}, {0x25CB, 0x25CB}, {0x25CE, 0x25CF},
      {0x2605, 0x2606}, {0x266A, 0x266A},
      {0x3001, 0x3002}, {0x3005, 0x3007}, {0x3008, 0x3011},
      {0x3041, 0x3096}, {0x309D, 0x309E},  // Hiragana
      {0x30A1, 0x30FA}, {0x30FB, 0x30FE},  // Katakana
      {0x4E00, 0x9FFF},                    // CJK Unified Ideographs
      {unicode::kMetaSpace, unicode::kMetaSpace},
  };
  c.blocked_terms = {"アダルト", "無修正", "出会い系", "無断転載禁止",
                     "無断転載を禁じます", "All rights reserved", "Copyright"};
  c.variant_map = {
      {"˗", "-"}, {"֊", "-"}, {"‐", "-"}, {"‑", "-"}, {"‒", "-"}, {"–", "-"},
      {"⁃", "-"}, {"−", "-"},
      {"—", "ー"}, {"―", "ー"}, {"─", "ー"}, {"━", "ー"},
      {"〜", "~"}, {"∼", "~"}, {"∾", "~"}, {"〰", "~"},
  };
  c.symbol_unification_map = {
      {"“", "\""}, {"”", "\""}, {"„", "\""}, {"‘", "'"}, {"’", "'"},
      {"〔", "("}, {"〕", ")"}, {"•", "・"}, {"·", "・"},
  };
  c.pii_patterns = {
      R"([A-Za-z0-9._%+\-]+@[A-Za-z0-9\-]+(?:\.[A-Za-z0-9\-]+)+)",
      R"(\+81[- ]?[0-9]{1,4}-?[0-9]{1,4}-?[0-9]{3,4})",
      R"((?<![0-9])0[0-9]{1,4}-[0-9]{1,4}-[0-9]{3,4}(?![0-9]))",
      R"((?<![0-9])\(0[0-9]{1,4}\)[0-9]{1,4}-[0-9]{3,4}(?![0-9]))",
      R"((?<![0-9])0[5789]0[0-9]{8}(?![0-9]))",
  };
  c.web_patterns = {
      R"((?:https?|ftp)://[A-Za-z0-9\-._~:/?#\[\]@!$&'()*+,;=%]+)",
      R"(www\.[A-Za-z0-9\-._~:/?#\[\]@!$&'()*+,;=%]+)",
      R"(@[A-Za-z0-9_]+)",
      R"(#[\p{L}\p{N}_]+)",
  };
  c.pattern_version = "patterns-v1";
  return c;
}

void CleaningConfig::validate() const {
  if (max_repeat_run < 1) {
    throw config_error("bad_value", "max_repeat_run must be >= 1");
  }
  if (!(incomplete_sentence_threshold >= 0.0 && incomplete_sentence_threshold <= 1.0)) {
    throw config_error("bad_value", "incomplete_sentence_threshold must lie in [0, 1]");
  }
  if (sentence_repeat_limit < 1) {
    throw config_error("bad_value", "sentence_repeat_limit must be >= 1");
  }
  for (const auto& r : charset_whitelist) {
    if (r.lo > r.hi) throw config_error("bad_value", "inverted whitelist range");
  }
  for (const auto* table : {&variant_map, &symbol_unification_map}) {
    std::unordered_map<std::string, std::string> next;
    for (const auto& [from, to] : *table) {
      if (from.empty()) throw config_error("bad_value", "empty unification source");
      next.emplace(from, to);
    }
    for (const auto& [from, to] : *table) {
      std::string cur = to;
      for (size_t steps = 0; steps <= table->size(); ++steps) {
        if (cur == from) {
          throw config_error("cyclic_map", "unification map cycles through '" + from + "'");
        }
        auto it = next.find(cur);
        if (it == next.end()) break;
        cur = it->second;
      }
    }
  }
}

bool CleaningConfig::is_whitelisted(char32_t cp) const {
  return std::any_of(charset_whitelist.begin(), charset_whitelist.end(),
                     [cp](const CodepointRange& r) { return cp >= r.lo && cp <= r.hi; });
}

// ---------------------------------------------------------------------------
// FilterReport

void FilterReport::reject(RejectReason reason, std::int64_t bytes) {
  const std::string key(to_string(reason));
  rejected[key] += 1;
  bytes_removed[key] += bytes;
}

void FilterReport::merge(const FilterReport& other) {
  input += other.input;
  kept += other.kept;
  bytes_in += other.bytes_in;
  bytes_out += other.bytes_out;
  sentences_removed += other.sentences_removed;
  for (const auto& [k, v] : other.rejected) rejected[k] += v;
  for (const auto& [k, v] : other.bytes_removed) bytes_removed[k] += v;
}

bool FilterReport::balanced() const {
  std::int64_t r = 0, b = 0;
  for (const auto& [k, v] : rejected) r += v;
  for (const auto& [k, v] : bytes_removed) b += v;
  return kept + r == input && bytes_out + b == bytes_in;
}

std::string FilterReport::to_text() const {
  std::ostringstream os;
  os << "# filter-report v1\n";
  os << "input\t" << input << "\n";
  os << "kept\t" << kept << "\n";
  for (const auto& [k, v] : rejected) os << "rejected." << k << "\t" << v << "\n";
  os << "bytes_in\t" << bytes_in << "\n";
  os << "bytes_out\t" << bytes_out << "\n";
  for (const auto& [k, v] : bytes_removed) os << "bytes_removed." << k << "\t" << v << "\n";
  os << "sentences_removed\t" << sentences_removed << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Rules

namespace rules {

std::string fullwidth_punctuation(std::string_view text, std::int64_t* n) {
  std::string out;
  out.reserve(text.size());
  std::int64_t count = 0;
  const std::u32string cps = unicode::decode_utf8(text);
  for (size_t i = 0; i < cps.size(); ++i) {
    char32_t cp = cps[i];
    if (cp == U'．') {
      cp = U'。', ++count;
    } else if (cp == U'，') {
      cp = U'、', ++count;
    } else if (cp == U'\r') {
      if (i + 1 < cps.size() && cps[i + 1] == U'\n') continue;
      cp = U'\n';
    }
    unicode::append_utf8(out, cp);
  }
  if (n != nullptr) *n = count;
  return out;
}

std::string nfkc(std::string_view text, std::int64_t* n) {
  UErrorCode status = U_ZERO_ERROR;
  const auto src = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  const icu::UnicodeString dst = nfkc_instance().normalize(src, status);
  if (U_FAILURE(status)) throw data_error("nfkc", u_errorName(status));
  std::string out = to_utf8(dst);
  if (n != nullptr) *n = (out != text) ? 1 : 0;
  return out;
}

std::string replace_all(std::string_view text, const ReplacementList& pairs,
                        std::int64_t* n) {
  std::string cur(text);
  std::int64_t count = 0;
  for (const auto& [from, to] : pairs) {
    if (from.empty() || cur.find(from) == std::string::npos) continue;
    std::string next;
    next.reserve(cur.size());
    size_t pos = 0;
    while (true) {
      const size_t hit = cur.find(from, pos);
      if (hit == std::string::npos) break;
      next.append(cur, pos, hit - pos);
      next += to;
      pos = hit + from.size();
      ++count;
    }
    next.append(cur, pos, std::string::npos);
    cur = std::move(next);
  }
  if (n != nullptr) *n = count;
  return cur;
}

std::string restore_symbols(std::string_view text, std::int64_t* n) {
  static const ReplacementList kRestore = {{"...", "…"}, {"°C", "℃"}};
  return replace_all(text, kRestore, n);
}

std::string squeeze_runs(std::string_view text, int max_run, std::int64_t* n) {
  const std::u32string cps = unicode::decode_utf8(text);
  std::string out;
  out.reserve(text.size());
  std::int64_t removed = 0;
  int run = 0;
  for (size_t i = 0; i < cps.size(); ++i) {
    run = (i > 0 && cps[i] == cps[i - 1]) ? run + 1 : 1;
    if (run > max_run) {
      ++removed;
      continue;
    }
    unicode::append_utf8(out, cps[i]);
  }
  if (n != nullptr) *n = removed;
  return out;
}

std::string to_meta_space(std::string_view text, std::int64_t* n) {
  const std::u32string cps = unicode::decode_utf8(text);
  std::string out;
  out.reserve(text.size());
  std::int64_t count = 0;
  bool in_run = false;
  for (char32_t cp : cps) {
    const bool space = unicode::is_horizontal_space(cp) || cp == unicode::kMetaSpace;
    if (space) {
      if (!in_run) out.append(unicode::kMetaSpaceUtf8);
      if (cp != unicode::kMetaSpace || in_run) ++count;
      in_run = true;
      continue;
    }
    in_run = false;
    unicode::append_utf8(out, cp);
  }
  if (n != nullptr) *n = count;
  return out;
}

}  // namespace rules

// ---------------------------------------------------------------------------
// TextCleaner

struct TextCleaner::Patterns {
  std::vector<std::unique_ptr<icu::RegexPattern>> pii;
  std::vector<std::unique_ptr<icu::RegexPattern>> web;
};

namespace {

std::unique_ptr<icu::RegexPattern> compile(const std::string& pattern) {
  UErrorCode status = U_ZERO_ERROR;
  UParseError perr;
  std::unique_ptr<icu::RegexPattern> p(icu::RegexPattern::compile(
      icu::UnicodeString::fromUTF8(pattern), perr, status));
  if (U_FAILURE(status)) {
    throw config_error("bad_pattern", "cannot compile pattern '" + pattern +
                                          "': " + u_errorName(status));
  }
  return p;
}

std::string remove_matches(std::string_view text,
                           const std::vector<std::unique_ptr<icu::RegexPattern>>& patterns,
                           std::int64_t* n) {
  std::int64_t count = 0;
  icu::UnicodeString cur = icu::UnicodeString::fromUTF8(
      icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  for (const auto& pattern : patterns) {
    UErrorCode status = U_ZERO_ERROR;
    std::unique_ptr<icu::RegexMatcher> m(pattern->matcher(cur, status));
    if (U_FAILURE(status)) throw data_error("regex", u_errorName(status));
    std::int64_t hits = 0;
    while (m->find()) ++hits;
    if (hits == 0) continue;
    m->reset();
    cur = m->replaceAll(icu::UnicodeString(), status);
    if (U_FAILURE(status)) throw data_error("regex", u_errorName(status));
    count += hits;
  }
  if (n != nullptr) *n = count;
  return to_utf8(cur);
}

}  // namespace

TextCleaner::TextCleaner(CleaningConfig config)
    : config_(std::move(config)), patterns_(std::make_unique<Patterns>()) {
  config_.validate();
  for (const auto& p : config_.pii_patterns) patterns_->pii.push_back(compile(p));
  for (const auto& p : config_.web_patterns) patterns_->web.push_back(compile(p));
  for (const auto& term : config_.blocked_terms) {
    std::string cleaned = clean(term);
    if (!cleaned.empty()) cleaned_blocked_terms_.push_back(std::move(cleaned));
  }
}

TextCleaner::~TextCleaner() = default;
TextCleaner::TextCleaner(TextCleaner&&) noexcept = default;
TextCleaner& TextCleaner::operator=(TextCleaner&&) noexcept = default;

std::string TextCleaner::run_pass(std::string_view text, RuleCounts* counts) const {
  std::int64_t n = 0;
  std::string s = rules::fullwidth_punctuation(text, &n);
  bump(counts, "01_fullwidth_punctuation", n);
  s = rules::nfkc(s, &n);
  bump(counts, "02_nfkc", n);
  s = rules::replace_all(s, config_.variant_map, &n);
  bump(counts, "03_variant_unification", n);
  s = rules::restore_symbols(s, &n);
  bump(counts, "04_symbol_restoration", n);
  s = remove_matches(s, patterns_->pii, &n);
  bump(counts, "05_personal_information", n);
  s = remove_matches(s, patterns_->web, &n);
  bump(counts, "06_web_notation", n);
  s = rules::replace_all(s, config_.symbol_unification_map, &n);
  bump(counts, "07_symbol_unification", n);

  // 8: charset whitelist. Line breaks and white-space survive for rule 10.
  {
    const std::u32string cps = unicode::decode_utf8(s);
    std::string kept;
    kept.reserve(s.size());
    std::int64_t dropped = 0;
    for (char32_t cp : cps) {
      if (cp == U'\n' || unicode::is_horizontal_space(cp) || config_.is_whitelisted(cp)) {
        unicode::append_utf8(kept, cp);
      } else {
        ++dropped;
      }
    }
    bump(counts, "08_charset_filter", dropped);
    s = std::move(kept);
  }

  s = rules::squeeze_runs(s, config_.max_repeat_run, &n);
  bump(counts, "09_repeat_squeeze", n);
  s = rules::to_meta_space(s, &n);
  bump(counts, "10_meta_space", n);
  return s;
}

std::string TextCleaner::clean(std::string_view text, RuleCounts* counts) const {
  std::string cur = run_pass(text, counts);
  for (int pass = 1; pass < kMaxPasses; ++pass) {
    std::string next = run_pass(cur, counts);
    if (next == cur) break;
    cur = std::move(next);
  }
  return cur;
}

std::string clean_text(std::string_view text, const CleaningConfig& config) {
  return TextCleaner(config).clean(text);
}

CleanDocument clean_document(const RawDocument& doc, const TextCleaner& cleaner) {
  CleanDocument out;
  out.id = doc.id;
  out.source = doc.source;
  out.text = cleaner.clean(doc.text, &out.rule_counts);
  return out;
}

std::optional<RejectReason> filter_document(const CleanDocument& doc,
                                            const TextCleaner& cleaner) {
  const std::u32string cps = unicode::decode_utf8(doc.text);
  if (trim_space(cps).empty()) return RejectReason::kEmpty;
  for (const auto& term : cleaner.cleaned_blocked_terms()) {
    if (doc.text.find(term) != std::string::npos) return RejectReason::kBlockedTerm;
  }
  std::int64_t lines = 0, incomplete = 0;
  std::u32string_view rest(cps);
  while (!rest.empty()) {
    const size_t nl = rest.find(U'\n');
    std::u32string_view line = trim_space(rest.substr(0, nl));
    rest = (nl == std::u32string_view::npos) ? std::u32string_view() : rest.substr(nl + 1);
    if (line.empty()) continue;
    while (line.size() > 1 && is_closing(line.back())) line.remove_suffix(1);
    ++lines;
    if (!is_terminal(line.back())) ++incomplete;
  }
  if (lines > 0 && static_cast<double>(incomplete) / static_cast<double>(lines) >
                       cleaner.config().incomplete_sentence_threshold) {
    return RejectReason::kIncompleteSentences;
  }
  return std::nullopt;
}

std::vector<std::string_view> split_sentences(std::string_view text) {
  std::vector<std::string_view> out;
  const std::u32string cps = unicode::decode_utf8(text);
  size_t start = 0, byte = 0;
  for (size_t i = 0; i < cps.size(); ++i) {
    std::string tmp;
    unicode::append_utf8(tmp, cps[i]);
    byte += tmp.size();
    bool cut = cps[i] == U'\n';
    if (is_terminal(cps[i])) {
      // keep runs like "！？" and a following line break in one piece
      const bool more = i + 1 < cps.size() && (is_terminal(cps[i + 1]) || cps[i + 1] == U'\n');
      cut = !more;
    }
    if (cut) {
      out.push_back(text.substr(start, byte - start));
      start = byte;
    }
  }
  if (start < text.size()) out.push_back(text.substr(start));
  return out;
}

namespace {

std::string sentence_key(std::string_view sentence) {
  const std::u32string cps = unicode::decode_utf8(sentence);
  return unicode::encode_utf8(trim_space(cps));
}

}  // namespace

DedupResult dedup_corpus(std::vector<CleanDocument> docs, int sentence_repeat_limit) {
  if (sentence_repeat_limit < 1) {
    throw config_error("bad_value", "sentence_repeat_limit must be >= 1");
  }
  DedupResult result;
  FilterReport& report = result.report;
  report.input = static_cast<std::int64_t>(docs.size());

  std::unordered_set<std::string> seen;
  std::vector<CleanDocument> unique;
  for (auto& doc : docs) {
    report.bytes_in += static_cast<std::int64_t>(doc.text.size());
    if (!seen.insert(doc.text).second) {
      report.reject(RejectReason::kDuplicate, static_cast<std::int64_t>(doc.text.size()));
      continue;
    }
    unique.push_back(std::move(doc));
  }

  std::unordered_map<std::string, std::int64_t> occurrences;
  for (const auto& doc : unique) {
    for (auto s : split_sentences(doc.text)) {
      std::string key = sentence_key(s);
      if (!key.empty()) ++occurrences[key];
    }
  }

  for (auto& doc : unique) {
    std::string kept;
    kept.reserve(doc.text.size());
    std::int64_t dropped_bytes = 0;
    for (auto s : split_sentences(doc.text)) {
      const std::string key = sentence_key(s);
      if (!key.empty() && occurrences[key] > sentence_repeat_limit) {
        dropped_bytes += static_cast<std::int64_t>(s.size());
        ++report.sentences_removed;
        continue;
      }
      kept.append(s);
    }
    if (dropped_bytes > 0) report.bytes_removed["duplicate_sentence"] += dropped_bytes;
    doc.text = std::move(kept);
    if (trim_space(unicode::decode_utf8(doc.text)).empty()) {
      report.reject(RejectReason::kEmpty, static_cast<std::int64_t>(doc.text.size()));
      continue;
    }
    report.kept += 1;
    report.bytes_out += static_cast<std::int64_t>(doc.text.size());
    result.docs.push_back(std::move(doc));
  }
  return result;
}

}  // namespace slm::clean
