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

#include "slm/segmenter.hpp"

#include <algorithm>
#include <fstream>

#include "slm/error.hpp"
#include "slm/unicode.hpp"

namespace slm::seg {

Lexicon::Lexicon(const std::vector<std::string>& entries) {
  for (const auto& e : entries) {
    if (e.empty()) continue;
    std::u32string cps = unicode::decode_utf8(e);
    max_entry_len_ = std::max(max_entry_len_, cps.size());
    entries_.insert(std::move(cps));
  }
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("io", "cannot open lexicon " + path.string());
  std::vector<std::string> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) entries.push_back(line);
  }
  return Lexicon(entries);
}

size_t LongestMatchSegmenter::match_at(std::u32string_view text, size_t pos) const {
  const size_t limit = std::min(lexicon_.max_entry_len(), text.size() - pos);
  for (size_t len = limit; len > 0; --len) {
    if (lexicon_.contains(text.substr(pos, len))) return len;
  }
  return 0;
}

std::vector<std::string> LongestMatchSegmenter::segment(std::string_view text) const {
  const std::u32string cps = unicode::decode_utf8(text);
  std::u32string_view view(cps);
  std::vector<std::string> words;
  size_t pos = 0;
  while (pos < cps.size()) {
    size_t len = match_at(view, pos);
    if (len == 0) {
      const unicode::Script script = unicode::script_of(cps[pos]);
      len = 1;
      while (pos + len < cps.size() && unicode::script_of(cps[pos + len]) == script &&
             match_at(view, pos + len) == 0) {
        ++len;
      }
    }
    words.push_back(unicode::encode_utf8(view.substr(pos, len)));
    pos += len;
  }
  return words;
}

std::vector<std::string> segment(std::string_view text, const Lexicon& lexicon) {
  return LongestMatchSegmenter(lexicon).segment(text);
}

}  // namespace slm::seg
