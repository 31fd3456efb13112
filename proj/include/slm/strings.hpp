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
#include <vector>

namespace slm {

// Levenshtein distance over code points (bytes if either side is not UTF-8).
size_t edit_distance(std::string_view a, std::string_view b);

// Up to n candidates ordered by edit distance, then by position in `candidates`.
std::vector<std::string> nearest_strings(std::string_view query,
                                         const std::vector<std::string>& candidates, size_t n);

// Backslash escapes for \\, \n, \t and \r so a string fits on one line.
std::string escape_line(std::string_view s);
std::string unescape_line(std::string_view s);

// Lowercase hex SHA-256 of a byte string or a file's contents.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::string& path);

}  // namespace slm
