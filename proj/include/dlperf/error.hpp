/* Copyright 2026 The dlperf Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dlperf {

enum class ErrorCode {
  kSchema,
  kCycle,
  kMissingDimension,
  kOverflow,
  kDimensionMismatch,
  kSingular,
  kInvalidArgument,
  kNotFound,
  kNonFinite,
  kIo,
  kLengthMismatch,
  kBudgetExceeded,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kSchema: return "schema violation";
    case ErrorCode::kCycle: return "cycle detected";
    case ErrorCode::kMissingDimension: return "missing dimension";
    case ErrorCode::kOverflow: return "overflow";
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kSingular: return "singular matrix";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kNotFound: return "not found";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kLengthMismatch: return "length mismatch";
    case ErrorCode::kBudgetExceeded: return "budget exceeded";
  }
  return "unknown error";
}

// Every error raised by the library carries a code so callers (and the CLI)
// can branch on the failure class without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace dlperf
