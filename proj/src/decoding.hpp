// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Calibrated decoding. Each step alternates a mask solve over the visual
// tokens with a token choice from (1 + lambda) * f_v - lambda * f_x, where f_v
// is computed under the mask and f_x without the image.

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "model.hpp"
#include "purifier.hpp"

CMIVLD_NS_BEGIN

enum class Variant {
  kFull,          // purifier mask + calibration
  kTextOnly,      // calibration with the full image
  kVisionOnly,    // purifier mask, no calibration
  kLearningFree,  // exhaustive mask search + calibration
  kBaseline,      // plain decoding
};

enum class Sampler { kGreedy, kMultinomial, kTopP };

enum class StepOrder {
  kMaskThenSample,  // the step-t mask conditions the step-t token
  kSampleThenMask,  // the token is drawn under the previous step's mask
};

std::string to_string(Variant v);
std::string to_string(Sampler s);
std::string to_string(StepOrder o);
Variant parse_variant(const std::string& s);
Sampler parse_sampler(const std::string& s);
StepOrder parse_step_order(const std::string& s);

struct DecodeConfig {
  double lambda = 0.5;
  double gamma = 0.8;
  double tau = 0.5;  // recorded for the purifier; top-k masks do not sample
  double delta = 0.1;
  double alpha = 100.0;
  Variant variant = Variant::kFull;
  Sampler sampler = Sampler::kGreedy;
  double top_p = 0.9;
  std::uint64_t seed = 0;
  int max_new_tokens = 16;
  int eos_token = 2;
  StepOrder order = StepOrder::kMaskThenSample;

  void validate() const;
  nlohmann::json to_json() const;
  static DecodeConfig from_json(const nlohmann::json& j);

  /// Calibration strength actually used by the variant.
  double effective_lambda() const;
  bool uses_mask() const;
};

struct StepRecord {
  int token = 0;
  double entropy = 0;       // of the distribution the token was drawn from
  std::size_t retained = 0;
  double log_ratio = 0;     // ln p(token | v*m, x, y<t) - ln p(token | x, y<t)
};

struct DecodeResult {
  std::vector<int> tokens;
  std::vector<StepRecord> per_step;
  std::vector<SoftVisualMask> masks;  // with-image mask of every step
  double wall_time = 0;
  double tokens_per_second = 0;

  nlohmann::json to_json() const;
};

/// (1 + lambda) * f_v - lambda * f_x.
Tensor calibrate_logits(const Tensor& f_v, const Tensor& f_x, double lambda);

/// {j : p_v[j] >= delta * max(p_v)}, ascending; always holds the argmax.
std::vector<std::size_t> truncate_candidates(const Tensor& p_v, double delta);

struct SampleOutcome {
  int token = 0;
  double entropy = 0;
};

/// Draws from softmax(logits) restricted to `candidates`.
SampleOutcome sample_token(const Tensor& logits, std::span<const std::size_t> candidates,
                           Sampler sampler, double top_p, Rng& rng);

/// Mask for the context (prompt, generated) at the current step.
using MaskSolver = std::function<SoftVisualMask(std::span<const int> generated)>;

/// The shared bi-level loop; `solver` is ignored when the variant uses no mask.
DecodeResult decode_loop(const TinyLvlmParams& params, const ModelConfig& config,
                         const Tensor& visual, std::span<const int> prompt,
                         const DecodeConfig& cfg, const MaskSolver& solver);

/// Solver returning the top round(gamma * N) tokens of the purifier.
MaskSolver purifier_solver(const TinyLvlmParams& params, const ModelConfig& config,
                           const Purifier& purifier, const Tensor& visual,
                           std::span<const int> prompt, double gamma);

/// Dispatches on cfg.variant. `purifier` is required for full and vision_only.
DecodeResult decode(const TinyLvlmParams& params, const ModelConfig& config,
                    const Purifier* purifier, const Tensor& visual, std::span<const int> prompt,
                    const DecodeConfig& cfg);

CMIVLD_NS_END
