// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"

namespace cmivld::testing {

inline Tensor random_visual(const ModelConfig& c, Rng& rng) {
  Tensor v({static_cast<std::size_t>(c.n_visual), static_cast<std::size_t>(c.patch_dim)});
  for (auto& x : v.data) x = static_cast<Scalar>(rng.normal());
  return v;
}

inline std::vector<int> random_tokens(const ModelConfig& c, std::size_t n, Rng& rng) {
  std::vector<int> t(n);
  for (auto& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(c.vocab_size)));
  return t;
}

inline ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 32;
  c.n_visual = 6;
  c.patch_dim = 5;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_head = 8;
  c.n_layers = 3;
  c.mlp_hidden = 32;
  c.max_seq = 24;
  c.purify_layer = 1;
  return c;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode{};
}

}  // namespace cmivld::testing
