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

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace slm::seg {

// Surface forms of a user dictionary (one entry per line on disk).
class Lexicon {
 public:
  Lexicon() = default;
  explicit Lexicon(const std::vector<std::string>& entries);

  static Lexicon load(const std::filesystem::path& path);

  bool contains(std::u32string_view surface) const {
    return entries_.count(std::u32string(surface)) != 0;
  }
  size_t size() const { return entries_.size(); }
  size_t max_entry_len() const { return max_entry_len_; }

 private:
  std::unordered_set<std::u32string> entries_;
  size_t max_entry_len_ = 0;
};

// Word pre-segmentation interface. Implementations must be lossless:
// concatenating the returned words reproduces the input.
class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual std::vector<std::string> segment(std::string_view text) const = 0;
};

// Greedy left-to-right longest match against a lexicon. Spans without a
// lexicon hit fall back to maximal single-script runs (Hiragana, Katakana,
// Han, Latin, digit, other); a run stops early where a lexicon entry starts.
class LongestMatchSegmenter final : public Segmenter {
 public:
  explicit LongestMatchSegmenter(Lexicon lexicon) : lexicon_(std::move(lexicon)) {}
  std::vector<std::string> segment(std::string_view text) const override;
  const Lexicon& lexicon() const { return lexicon_; }

 private:
  size_t match_at(std::u32string_view text, size_t pos) const;
  Lexicon lexicon_;
};

std::vector<std::string> segment(std::string_view text, const Lexicon& lexicon);

}  // namespace slm::seg
