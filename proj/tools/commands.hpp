// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace cmivld::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitMissingFile = 2;
inline constexpr int kExitInvalidConfig = 3;
inline constexpr int kExitNumerical = 4;

// Runs one command line (args excludes the program name). The summary goes to
// out as one JSON line; failures go to err as one JSON error record.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace cmivld::cli
