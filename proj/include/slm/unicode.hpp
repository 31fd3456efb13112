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

#include <string>
#include <string_view>

namespace slm::unicode {

inline constexpr char32_t kMetaSpace = U'▁';
inline constexpr std::string_view kMetaSpaceUtf8 = "\xE2\x96\x81";

// Strict UTF-8 decoding. Throws slm::Error(kData, "invalid_utf8") on
// overlong forms, surrogates, truncated sequences and values > U+10FFFF.
std::u32string decode_utf8(std::string_view utf8);
std::string encode_utf8(std::u32string_view text);
void append_utf8(std::string& out, char32_t cp);

bool is_valid_utf8(std::string_view utf8);

// Unicode White_Space property, excluding '\n' which is kept as a line break.
bool is_horizontal_space(char32_t cp);

enum class Script { kHiragana, kKatakana, kHan, kLatin, kDigit, kOther };

Script script_of(char32_t cp);

}  // namespace slm::unicode
