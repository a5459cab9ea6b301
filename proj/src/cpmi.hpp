// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Sentence likelihoods and conditional pointwise mutual information between
// an image and a token sequence given a prompt. All logs are natural.

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "model.hpp"

CMIVLD_NS_BEGIN

inline constexpr double kProbFloor = 1e-12;

struct CpmiReport {
  std::vector<double> per_step_log_ratio;
  double total = 0;
  double with_image_log_prob = 0;
  double without_image_log_prob = 0;

  nlohmann::json to_json() const;
};

/// ln q(y | [v,] x) by one teacher-forced pass. `mask` is optional and only
/// valid with an image.
double sequence_log_prob(const TinyLvlmParams& params, const ModelConfig& config,
                         const Tensor* visual, std::span<const int> prompt,
                         std::span<const int> y, const SoftVisualMask* mask = nullptr);

/// ln p(y_t | [v,] x, y_<t) for a single step, floored at kProbFloor.
double step_log_prob(const TinyLvlmParams& params, const ModelConfig& config,
                     const Tensor* visual, std::span<const int> prompt,
                     std::span<const int> prefix, int token,
                     const SoftVisualMask* mask = nullptr);

/// Per-step log-ratios from paired forward passes on each prefix.
/// `step_masks`, when given, supplies the with-image mask for every step.
CpmiReport cpmi_pointwise(const TinyLvlmParams& params, const ModelConfig& config,
                          const Tensor& visual, std::span<const int> prompt,
                          std::span<const int> y,
                          std::span<const SoftVisualMask> step_masks = {});

/// Log-probability of `token` under `logits`, floored at kProbFloor.
double floored_log_prob(const Tensor& logits, int token);

CMIVLD_NS_END
