// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "cpmi.hpp"
#include "error.hpp"
#include "purifier.hpp"

CMIVLD_NS_BEGIN

namespace {

/// Everything about one context that does not depend on the mask.
struct OracleContext {
  PrefixState prefix;
  double text_log_prob = 0;
  int token = 0;
};

OracleContext prepare(const TinyLvlmParams& params, const ModelConfig& config,
                      const Tensor& visual, std::span<const int> prompt,
                      std::span<const int> y_prefix, int y_t) {
  require(y_t >= 0 && y_t < config.vocab_size, ErrorCode::kInvalidInput,
          "oracle: target token outside vocabulary");
  OracleContext c;
  c.prefix = forward_prefix(params, config, {&visual, prompt, y_prefix});
  c.text_log_prob = step_log_prob(params, config, nullptr, prompt, y_prefix, y_t);
  c.token = y_t;
  return c;
}

double score_mask(const TinyLvlmParams& params, const ModelConfig& config,
                  const OracleContext& c, const Tensor& weights, double alpha) {
  const Var w = ag::constant(weights);
  const GraphOutput out = forward_suffix(params, config, c.prefix, w, LogitRows::kLast);
  const double lp_v = floored_log_prob(out.logits->value, c.token);
  const auto layer = static_cast<std::size_t>(config.purify_layer);
  const double attn =
      attn_visual_mass(out.attention[layer], c.prefix.layout.n_visual, w)->value.data[0];
  return alpha * attn + lp_v - c.text_log_prob;
}

}  // namespace

nlohmann::json OracleResult::to_json() const {
  std::vector<int> bits;
  for (auto w : best_mask.weights.data) bits.push_back(w > 0 ? 1 : 0);
  nlohmann::json j{{"best_mask", bits},
                   {"best_score", best_score},
                   {"enumerated_count", enumerated_count},
                   {"target_token", target_token}};
  if (!all_scores.empty()) {
    nlohmann::json all = nlohmann::json::array();
    for (const auto& [m, s] : all_scores) all.push_back({{"mask", m}, {"score", s}});
    j["all_scores"] = all;
  }
  return j;
}

double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  double r = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  }
  return std::round(r);
}

int greedy_candidate(const TinyLvlmParams& params, const ModelConfig& config,
                     const Tensor& visual, std::span<const int> prompt,
                     std::span<const int> y_prefix) {
  const ForwardTrace tr = forward(params, config, {&visual, prompt, y_prefix});
  const auto& l = tr.logits.data;
  return static_cast<int>(std::max_element(l.begin(), l.end()) - l.begin());
}

OracleResult oracle_mask_search(const TinyLvlmParams& params, const ModelConfig& config,
                                const Tensor& visual, std::span<const int> prompt,
                                std::span<const int> y_prefix, int y_t, std::size_t k,
                                double alpha, const OracleOptions& options) {
  const auto n = static_cast<std::size_t>(config.n_visual);
  require(k >= 1 && k <= n, ErrorCode::kInvalidInput,
          "oracle: retained count must lie in [1, n_visual]");
  const double count = binomial(n, k);
  require(count <= static_cast<double>(options.cap), ErrorCode::kEnumerationTooLarge,
          "oracle: C(" + std::to_string(n) + ", " + std::to_string(k) + ") exceeds the cap of " +
              std::to_string(options.cap));
  const OracleContext ctx = prepare(params, config, visual, prompt, y_prefix, y_t);

  // next_permutation walks 0/1 vectors in increasing lexicographic order, so
  // keeping only strict improvements resolves ties toward the smallest mask.
  std::vector<int> bits(n, 0);
  std::fill(bits.end() - static_cast<std::ptrdiff_t>(k), bits.end(), 1);
  Tensor weights({n});
  OracleResult r;
  r.target_token = y_t;
  r.best_score = -INFINITY;
  do {
    for (std::size_t j = 0; j < n; ++j) weights.data[j] = static_cast<Scalar>(bits[j]);
    const double s = score_mask(params, config, ctx, weights, alpha);
    require(std::isfinite(s), ErrorCode::kNumerical, "oracle: non-finite score");
    ++r.enumerated_count;
    if (options.keep_all) r.all_scores.emplace_back(bits, s);
    if (s > r.best_score) {
      r.best_score = s;
      r.best_mask = SoftVisualMask::from_bits(bits);
    }
  } while (std::next_permutation(bits.begin(), bits.end()));
  return r;
}

double oracle_score(const TinyLvlmParams& params, const ModelConfig& config, const Tensor& visual,
                    std::span<const int> prompt, std::span<const int> y_prefix, int y_t,
                    const SoftVisualMask& mask, double alpha) {
  require(mask.size() == static_cast<std::size_t>(config.n_visual), ErrorCode::kInvalidInput,
          "oracle: mask length mismatch");
  const OracleContext ctx = prepare(params, config, visual, prompt, y_prefix, y_t);
  return score_mask(params, config, ctx, mask.weights, alpha);
}

DecodeResult lf_decode(const TinyLvlmParams& params, const ModelConfig& config,
                       const Tensor& visual, std::span<const int> prompt,
                       const DecodeConfig& cfg) {
  require(cfg.variant == Variant::kLearningFree, ErrorCode::kInvalidConfig,
          "lf_decode: variant must be learning_free");
  const auto n = static_cast<std::size_t>(config.n_visual);
  const std::size_t k = retained_count(cfg.gamma, n);
  require(binomial(n, k) <= static_cast<double>(kEnumerationCap), ErrorCode::kEnumerationTooLarge,
          "lf_decode: mask enumeration exceeds the cap");
  MaskSolver solver = [&](std::span<const int> generated) {
    if (k == n) return SoftVisualMask::ones(n);
    const int candidate = greedy_candidate(params, config, visual, prompt, generated);
    return oracle_mask_search(params, config, visual, prompt, generated, candidate, k, cfg.alpha)
        .best_mask;
  };
  return decode_loop(params, config, visual, prompt, cfg, solver);
}

nlohmann::json FactorizationReport::to_json() const {
  return {{"max_deviation", max_deviation},
          {"max_abs_side", max_abs_side},
          {"trials", trials},
          {"seconds", seconds}};
}

namespace {

void run_trial(const TinyLvlmParams& params, const ModelConfig& config, Rng& rng,
               const SoftVisualMask* mask, FactorizationReport& report) {
  const auto n = static_cast<std::size_t>(config.n_visual);
  Tensor visual({n, static_cast<std::size_t>(config.patch_dim)});
  for (auto& v : visual.data) v = static_cast<Scalar>(rng.normal());
  const std::size_t room = static_cast<std::size_t>(config.max_seq) - n;
  const std::size_t prompt_len = 1 + rng.below(std::min<std::size_t>(4, room - 1));
  const std::size_t y_len = 1 + rng.below(std::min<std::size_t>(16, room - prompt_len + 1));
  std::vector<int> prompt(prompt_len), y(y_len);
  for (auto& t : prompt) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.vocab_size)));
  for (auto& t : y) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.vocab_size)));

  std::vector<SoftVisualMask> masks;
  if (mask) masks.assign(y_len, *mask);
  const CpmiReport steps = cpmi_pointwise(params, config, visual, prompt, y, masks);
  const double with_image = sequence_log_prob(params, config, &visual, prompt, y, mask);
  const double without = sequence_log_prob(params, config, nullptr, prompt, y);
  const double dev = std::abs(steps.total - (with_image - without));
  report.max_deviation = std::max(report.max_deviation, dev);
  report.max_abs_side = std::max(report.max_abs_side, std::abs(steps.total));
  ++report.trials;
}

}  // namespace

FactorizationReport verify_factorization(const TinyLvlmParams& params, const ModelConfig& config,
                                         int trials, Rng& rng, const SoftVisualMask* mask) {
  require(trials >= 1, ErrorCode::kInvalidInput, "verify_factorization: trials must be >= 1");
  config.validate();
  require(config.max_seq - config.n_visual >= 2, ErrorCode::kInvalidConfig,
          "verify_factorization: max_seq leaves no room for text");
  const auto start = std::chrono::steady_clock::now();
  FactorizationReport report;
  for (int i = 0; i < trials; ++i) {
    Rng trial = rng.fork(static_cast<std::uint64_t>(i));
    run_trial(params, config, trial, mask, report);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

FactorizationReport verify_factorization_random(const ModelConfig& config, int trials,
                                                std::uint64_t seed) {
  require(trials >= 1, ErrorCode::kInvalidInput, "verify_factorization: trials must be >= 1");
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  Rng root = Rng(seed).fork("factorization");
  FactorizationReport report;
  for (int i = 0; i < trials; ++i) {
    Rng trial = root.fork(static_cast<std::uint64_t>(i));
    const TinyLvlmParams params = init_params(config, trial.fork("model").next_u64());
    run_trial(params, config, trial, nullptr, report);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

CMIVLD_NS_END
