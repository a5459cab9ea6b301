// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cmivld {

enum class ErrorCode {
  kInvalidInput = 1,
  kInvalidConfig = 2,
  kSequenceTooLong = 3,
  kIndex = 4,
  kIo = 5,
  kNotFound = 6,
  kCorruptCheckpoint = 7,
  kUnsupportedFormat = 8,
  kEnumerationTooLarge = 9,
  kNumerical = 10,
};

inline const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidInput: return "invalid_input";
    case ErrorCode::kInvalidConfig: return "invalid_config";
    case ErrorCode::kSequenceTooLong: return "sequence_too_long";
    case ErrorCode::kIndex: return "index_error";
    case ErrorCode::kIo: return "io_error";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kCorruptCheckpoint: return "corrupt_checkpoint";
    case ErrorCode::kUnsupportedFormat: return "unsupported_format";
    case ErrorCode::kEnumerationTooLarge: return "enumeration_too_large";
    case ErrorCode::kNumerical: return "numerical_failure";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

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

}  // namespace cmivld
