// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Compiled with CMIVLD_DOUBLE_PRECISION.

#include "capi_internal.hpp"
#include "purifier.hpp"

namespace cmivld::capi_detail {

nlohmann::json loss_gradcheck(int n_configs, std::uint64_t seed, double h) {
  static_assert(sizeof(Scalar) == sizeof(double), "build this file in double precision");
  nlohmann::json j = purifier_loss_gradcheck(n_configs, seed, h).to_json();
  j["step"] = h;
  j["seed"] = seed;
  return j;
}

}  // namespace cmivld::capi_detail
