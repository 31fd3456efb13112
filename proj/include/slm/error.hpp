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

#include <stdexcept>
#include <string>
#include <string_view>

namespace slm {

// Failure categories. The CLI maps them onto process exit codes.
enum class ErrorKind {
  kConfig,   // bad or unknown configuration, schema mismatch
  kData,     // malformed input files, invalid ids, shape mismatches
  kNumeric,  // non-finite values during optimization
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string code, const std::string& message)
      : std::runtime_error(code + ": " + message),
        kind_(kind),
        code_(std::move(code)) {}

  ErrorKind kind() const noexcept { return kind_; }
  // Short machine-readable reason, e.g. "empty_document".
  const std::string& code() const noexcept { return code_; }

 private:
  ErrorKind kind_;
  std::string code_;
};

inline Error config_error(std::string code, const std::string& message) {
  return Error(ErrorKind::kConfig, std::move(code), message);
}
inline Error data_error(std::string code, const std::string& message) {
  return Error(ErrorKind::kData, std::move(code), message);
}
inline Error numeric_error(std::string code, const std::string& message) {
  return Error(ErrorKind::kNumeric, std::move(code), message);
}

}  // namespace slm
