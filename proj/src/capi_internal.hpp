// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Bridges between the single- and double-precision builds inside the C API.

#pragma once

#include <cstdint>

#include "json.hpp"

namespace cmivld::capi_detail {

// Purifier loss gradient check, run on the double-precision core.
nlohmann::json loss_gradcheck(int n_configs, std::uint64_t seed, double h);

}  // namespace cmivld::capi_detail
