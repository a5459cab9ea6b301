// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Exhaustive mask search for the lower subproblem, the learning-free decoder
// built on it, and a numeric check that per-step log-ratios sum to the
// sequence-level likelihood ratio.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "decoding.hpp"
#include "json.hpp"
#include "model.hpp"

CMIVLD_NS_BEGIN

inline constexpr std::size_t kEnumerationCap = 1000000;

struct OracleOptions {
  std::size_t cap = kEnumerationCap;
  bool keep_all = false;  // record every (mask, score) pair
};

struct OracleResult {
  SoftVisualMask best_mask;
  double best_score = 0;
  std::vector<std::pair<std::vector<int>, double>> all_scores;
  std::size_t enumerated_count = 0;
  int target_token = 0;

  nlohmann::json to_json() const;
};

/// C(n, k) as a double (exact for the sizes that pass the cap).
double binomial(std::size_t n, std::size_t k);

/// Greedy token of the full-image distribution at this context.
int greedy_candidate(const TinyLvlmParams& params, const ModelConfig& config,
                     const Tensor& visual, std::span<const int> prompt,
                     std::span<const int> y_prefix);

/// Scores every k-subset mask by
///   alpha * Attn_i(v; m) + ln p(y_t | v*m, x, y<t) - ln p(y_t | x, y<t)
/// and returns the best. Ties keep the lexicographically smallest 0/1 vector.
OracleResult oracle_mask_search(const TinyLvlmParams& params, const ModelConfig& config,
                                const Tensor& visual, std::span<const int> prompt,
                                std::span<const int> y_prefix, int y_t, std::size_t k,
                                double alpha, const OracleOptions& options = {});

/// Score of one fixed mask under the same objective.
double oracle_score(const TinyLvlmParams& params, const ModelConfig& config, const Tensor& visual,
                    std::span<const int> prompt, std::span<const int> y_prefix, int y_t,
                    const SoftVisualMask& mask, double alpha);

/// Decoding with the oracle as the mask solver; masks are scored against the
/// greedy full-image candidate of each step.
DecodeResult lf_decode(const TinyLvlmParams& params, const ModelConfig& config,
                       const Tensor& visual, std::span<const int> prompt, const DecodeConfig& cfg);

struct FactorizationReport {
  double max_deviation = 0;
  double max_abs_side = 0;  // largest |sum of step log-ratios| seen
  int trials = 0;
  double seconds = 0;

  nlohmann::json to_json() const;
};

/// Random (scene, prompt, y) triples on a fixed model. `mask`, when given,
/// applies to both sides' with-image terms.
FactorizationReport verify_factorization(const TinyLvlmParams& params, const ModelConfig& config,
                                         int trials, Rng& rng,
                                         const SoftVisualMask* mask = nullptr);

/// As above, drawing a fresh random model for every trial.
FactorizationReport verify_factorization_random(const ModelConfig& config, int trials,
                                                std::uint64_t seed);

CMIVLD_NS_END
