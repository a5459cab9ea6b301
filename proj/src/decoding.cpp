// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "decoding.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "cpmi.hpp"
#include "error.hpp"
#include "oracle.hpp"

CMIVLD_NS_BEGIN

namespace {

template <typename E>
struct NamedEnum {
  E value;
  const char* name;
};

constexpr NamedEnum<Variant> kVariants[] = {{Variant::kFull, "full"},
                                            {Variant::kTextOnly, "text_only"},
                                            {Variant::kVisionOnly, "vision_only"},
                                            {Variant::kLearningFree, "learning_free"},
                                            {Variant::kBaseline, "baseline"}};
constexpr NamedEnum<Sampler> kSamplers[] = {
    {Sampler::kGreedy, "greedy"}, {Sampler::kMultinomial, "multinomial"}, {Sampler::kTopP, "top_p"}};
constexpr NamedEnum<StepOrder> kOrders[] = {{StepOrder::kMaskThenSample, "mask_then_sample"},
                                            {StepOrder::kSampleThenMask, "sample_then_mask"}};

template <typename E, std::size_t N>
std::string name_of(const NamedEnum<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <typename E, std::size_t N>
E parse(const NamedEnum<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table) {
    if (s == e.name) return e.value;
  }
  fail(ErrorCode::kInvalidConfig, std::string("unknown ") + what + ": " + s);
}

}  // namespace

std::string to_string(Variant v) { return name_of(kVariants, v); }
std::string to_string(Sampler s) { return name_of(kSamplers, s); }
std::string to_string(StepOrder o) { return name_of(kOrders, o); }
Variant parse_variant(const std::string& s) { return parse(kVariants, s, "variant"); }
Sampler parse_sampler(const std::string& s) { return parse(kSamplers, s, "sampler"); }
StepOrder parse_step_order(const std::string& s) { return parse(kOrders, s, "step order"); }

void DecodeConfig::validate() const {
  require(std::isfinite(lambda) && lambda >= 0, ErrorCode::kInvalidConfig, "lambda must be >= 0");
  require(gamma > 0 && gamma <= 1, ErrorCode::kInvalidConfig, "gamma must lie in (0, 1]");
  require(tau > 0, ErrorCode::kInvalidConfig, "tau must be positive");
  require(delta >= 0 && delta <= 1, ErrorCode::kInvalidConfig, "delta must lie in [0, 1]");
  require(alpha >= 0, ErrorCode::kInvalidConfig, "alpha must be >= 0");
  require(top_p > 0 && top_p <= 1, ErrorCode::kInvalidConfig, "top_p must lie in (0, 1]");
  require(max_new_tokens >= 1, ErrorCode::kInvalidConfig, "max_new_tokens must be >= 1");
}

nlohmann::json DecodeConfig::to_json() const {
  return {{"lambda", lambda},
          {"gamma", gamma},
          {"tau", tau},
          {"delta", delta},
          {"alpha", alpha},
          {"variant", to_string(variant)},
          {"sampler", to_string(sampler)},
          {"top_p", top_p},
          {"seed", seed},
          {"max_new_tokens", max_new_tokens},
          {"eos_token", eos_token},
          {"step_order", to_string(order)}};
}

DecodeConfig DecodeConfig::from_json(const nlohmann::json& j) {
  DecodeConfig c;
  try {
    c.lambda = j.value("lambda", c.lambda);
    c.gamma = j.value("gamma", c.gamma);
    c.tau = j.value("tau", c.tau);
    c.delta = j.value("delta", c.delta);
    c.alpha = j.value("alpha", c.alpha);
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("sampler")) c.sampler = parse_sampler(j.at("sampler").get<std::string>());
    c.top_p = j.value("top_p", c.top_p);
    c.seed = j.value("seed", c.seed);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.eos_token = j.value("eos_token", c.eos_token);
    if (j.contains("step_order")) c.order = parse_step_order(j.at("step_order").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, std::string("decode config: ") + e.what());
  }
  c.validate();
  return c;
}

double DecodeConfig::effective_lambda() const {
  return variant == Variant::kVisionOnly || variant == Variant::kBaseline ? 0.0 : lambda;
}

bool DecodeConfig::uses_mask() const {
  return variant == Variant::kFull || variant == Variant::kVisionOnly ||
         variant == Variant::kLearningFree;
}

nlohmann::json DecodeResult::to_json() const {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : per_step) {
    steps.push_back({{"token", s.token},
                     {"entropy", s.entropy},
                     {"retained", s.retained},
                     {"log_ratio", s.log_ratio}});
  }
  return {{"tokens", tokens},
          {"per_step", steps},
          {"wall_time", wall_time},
          {"tokens_per_second", tokens_per_second}};
}

Tensor calibrate_logits(const Tensor& f_v, const Tensor& f_x, double lambda) {
  require(f_v.shape == f_x.shape, ErrorCode::kInvalidInput, "calibrate_logits: shape mismatch");
  require(f_v.all_finite() && f_x.all_finite(), ErrorCode::kInvalidInput,
          "calibrate_logits: non-finite logits");
  const auto a = static_cast<Scalar>(1.0 + lambda);
  const auto b = static_cast<Scalar>(lambda);
  Tensor out(f_v.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a * f_v.data[i] - b * f_x.data[i];
  return out;
}

std::vector<std::size_t> truncate_candidates(const Tensor& p_v, double delta) {
  require(p_v.numel() > 0, ErrorCode::kInvalidInput, "truncate_candidates: empty distribution");
  std::size_t best = 0;
  for (std::size_t j = 1; j < p_v.numel(); ++j) {
    if (p_v.data[j] > p_v.data[best]) best = j;
  }
  const double threshold = delta * static_cast<double>(p_v.data[best]);
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < p_v.numel(); ++j) {
    const double p = p_v.data[j];
    if (j == best || (p >= threshold && p > 0)) out.push_back(j);
  }
  return out;
}

SampleOutcome sample_token(const Tensor& logits, std::span<const std::size_t> candidates,
                           Sampler sampler, double top_p, Rng& rng) {
  require(!candidates.empty(), ErrorCode::kInvalidInput, "sample_token: no candidates");
  double mx = -INFINITY;
  for (auto j : candidates) mx = std::max(mx, static_cast<double>(logits.data[j]));
  std::vector<double> p(candidates.size());
  double total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    p[i] = std::exp(static_cast<double>(logits.data[candidates[i]]) - mx);
    total += p[i];
  }
  SampleOutcome out;
  for (auto& v : p) {
    v /= total;
    if (v > 0) out.entropy -= v * std::log(v);
  }

  std::size_t pick = 0;
  switch (sampler) {
    case Sampler::kGreedy:
      for (std::size_t i = 1; i < p.size(); ++i) {
        if (logits.data[candidates[i]] > logits.data[candidates[pick]]) pick = i;
      }
      break;
    case Sampler::kMultinomial:
    case Sampler::kTopP: {
      std::vector<std::size_t> order(p.size());
      std::iota(order.begin(), order.end(), 0);
      double mass = 1.0;
      if (sampler == Sampler::kTopP) {
        std::stable_sort(order.begin(), order.end(),
                         [&p](std::size_t a, std::size_t b) { return p[a] > p[b]; });
        double acc = 0;
        std::size_t keep = 0;
        while (keep < order.size() && acc < top_p) acc += p[order[keep++]];
        order.resize(keep);
        mass = acc;
      }
      const double u = rng.uniform() * mass;
      double acc = 0;
      pick = order.back();
      for (auto i : order) {
        acc += p[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
      break;
    }
  }
  out.token = static_cast<int>(candidates[pick]);
  return out;
}

DecodeResult decode_loop(const TinyLvlmParams& params, const ModelConfig& config,
                         const Tensor& visual, std::span<const int> prompt,
                         const DecodeConfig& cfg, const MaskSolver& solver) {
  cfg.validate();
  require(!cfg.uses_mask() || static_cast<bool>(solver), ErrorCode::kInvalidConfig,
          "decode: variant " + to_string(cfg.variant) + " needs a mask solver");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t n_visual = static_cast<std::size_t>(config.n_visual);
  const double lambda = cfg.effective_lambda();
  Rng root = Rng(cfg.seed).fork("decode");

  DecodeResult result;
  std::vector<int> generated;
  SoftVisualMask carried = SoftVisualMask::ones(n_visual);
  for (int t = 0; t < cfg.max_new_tokens; ++t) {
    if (n_visual + prompt.size() + generated.size() > static_cast<std::size_t>(config.max_seq)) break;
    SoftVisualMask mask = SoftVisualMask::ones(n_visual);
    if (cfg.uses_mask()) mask = cfg.order == StepOrder::kMaskThenSample ? solver(generated) : carried;

    const ModelInput with_image{&visual, prompt, generated};
    const ForwardTrace fv = forward(params, config, with_image, cfg.uses_mask() ? &mask : nullptr);
    const ForwardTrace fx = forward(params, config, {nullptr, prompt, generated});
    require(fv.logits.all_finite() && fx.logits.all_finite(), ErrorCode::kNumerical,
            "decode: non-finite logits");
    const Tensor calibrated = calibrate_logits(fv.logits, fx.logits, lambda);
    const auto candidates = truncate_candidates(softmax(fv.logits, 0), cfg.delta);
    Rng step_rng = root.fork(static_cast<std::uint64_t>(t));
    const SampleOutcome s = sample_token(calibrated, candidates, cfg.sampler, cfg.top_p, step_rng);

    StepRecord rec;
    rec.token = s.token;
    rec.entropy = s.entropy;
    rec.retained = mask.retained();
    rec.log_ratio = floored_log_prob(fv.logits, s.token) - floored_log_prob(fx.logits, s.token);
    result.per_step.push_back(rec);
    result.masks.push_back(std::move(mask));
    generated.push_back(s.token);
    if (s.token == cfg.eos_token) break;
    if (cfg.uses_mask() && cfg.order == StepOrder::kSampleThenMask) carried = solver(generated);
  }
  result.tokens = generated;
  result.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.tokens_per_second =
      result.wall_time > 0 ? static_cast<double>(result.tokens.size()) / result.wall_time : 0.0;
  return result;
}

MaskSolver purifier_solver(const TinyLvlmParams& params, const ModelConfig& config,
                           const Purifier& purifier, const Tensor& visual,
                           std::span<const int> prompt, double gamma) {
  const std::size_t k = retained_count(gamma, static_cast<std::size_t>(config.n_visual));
  return [&params, &config, &purifier, &visual, prompt, k](std::span<const int> generated) {
    const Tensor z = context_embeddings(params, config, {&visual, prompt, generated});
    return top_k_mask(purifier_forward(purifier.params, purifier.config, z), k);
  };
}

DecodeResult decode(const TinyLvlmParams& params, const ModelConfig& config,
                    const Purifier* purifier, const Tensor& visual, std::span<const int> prompt,
                    const DecodeConfig& cfg) {
  cfg.validate();
  require(visual.rank() == 2 && visual.rows() == static_cast<std::size_t>(config.n_visual),
          ErrorCode::kInvalidInput, "decode: visual input must be [n_visual, patch_dim]");
  switch (cfg.variant) {
    case Variant::kFull:
    case Variant::kVisionOnly: {
      require(purifier != nullptr, ErrorCode::kInvalidConfig,
              "decode: variant " + to_string(cfg.variant) + " needs a purifier");
      check_compatible(purifier->config, purifier->params, config, params.parameter_count());
      return decode_loop(params, config, visual, prompt, cfg,
                         purifier_solver(params, config, *purifier, visual, prompt, cfg.gamma));
    }
    case Variant::kLearningFree:
      return lf_decode(params, config, visual, prompt, cfg);
    case Variant::kTextOnly:
    case Variant::kBaseline:
      break;
  }
  return decode_loop(params, config, visual, prompt, cfg, {});
}

CMIVLD_NS_END
