// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "cpmi.hpp"

#include <algorithm>
#include <cmath>

#include "error.hpp"

CMIVLD_NS_BEGIN

namespace {

void check_tokens(const ModelConfig& config, std::span<const int> y) {
  for (int t : y) {
    require(t >= 0 && t < config.vocab_size, ErrorCode::kInvalidInput,
            "token " + std::to_string(t) + " outside vocabulary");
  }
}

}  // namespace

nlohmann::json CpmiReport::to_json() const {
  return {{"per_step_log_ratio", per_step_log_ratio},
          {"total", total},
          {"with_image_log_prob", with_image_log_prob},
          {"without_image_log_prob", without_image_log_prob}};
}

double floored_log_prob(const Tensor& logits, int token) {
  const Tensor lp = log_softmax(logits);
  return std::max(static_cast<double>(lp.data[static_cast<std::size_t>(token)]),
                  std::log(kProbFloor));
}

double sequence_log_prob(const TinyLvlmParams& params, const ModelConfig& config,
                         const Tensor* visual, std::span<const int> prompt,
                         std::span<const int> y, const SoftVisualMask* mask) {
  check_tokens(config, y);
  if (y.empty()) return 0.0;
  Var w;
  if (mask) {
    require(visual != nullptr, ErrorCode::kInvalidInput, "mask given without visual input");
    mask->validate();
    w = ag::constant(mask->weights);
  }
  ModelInput in{visual, prompt, y.first(y.size() - 1)};
  GraphOutput g = forward_graph(params, config, in, w, LogitRows::kText);
  const Tensor lp = log_softmax(g.logits->value);
  const double floor = std::log(kProbFloor);
  double total = 0;
  for (std::size_t t = 0; t < y.size(); ++t) {
    total += std::max(static_cast<double>(lp.at(t, static_cast<std::size_t>(y[t]))), floor);
  }
  return total;
}

double step_log_prob(const TinyLvlmParams& params, const ModelConfig& config,
                     const Tensor* visual, std::span<const int> prompt,
                     std::span<const int> prefix, int token, const SoftVisualMask* mask) {
  const int tok[] = {token};
  check_tokens(config, tok);
  const ForwardTrace tr = forward(params, config, {visual, prompt, prefix}, mask);
  return floored_log_prob(tr.logits, token);
}

CpmiReport cpmi_pointwise(const TinyLvlmParams& params, const ModelConfig& config,
                          const Tensor& visual, std::span<const int> prompt,
                          std::span<const int> y, std::span<const SoftVisualMask> step_masks) {
  check_tokens(config, y);
  require(step_masks.empty() || step_masks.size() == y.size(), ErrorCode::kInvalidInput,
          "cpmi: one mask per step required");
  CpmiReport r;
  for (std::size_t t = 0; t < y.size(); ++t) {
    const SoftVisualMask* m = step_masks.empty() ? nullptr : &step_masks[t];
    const double with_image = step_log_prob(params, config, &visual, prompt, y.first(t), y[t], m);
    const double without = step_log_prob(params, config, nullptr, prompt, y.first(t), y[t]);
    r.per_step_log_ratio.push_back(with_image - without);
    r.with_image_log_prob += with_image;
    r.without_image_log_prob += without;
    r.total += with_image - without;
  }
  return r;
}

CMIVLD_NS_END
