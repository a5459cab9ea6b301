// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <set>

#include "decoding.hpp"
#include "doctest.h"
#include "oracle.hpp"
#include "purifier.hpp"
#include "test_util.hpp"

using namespace cmivld;
using namespace cmivld::testing;

namespace {

ModelConfig config_with_visual(int n) {
  ModelConfig c;
  c.n_visual = n;
  return c;
}

}  // namespace

TEST_CASE("binomial coefficients") {
  CHECK(binomial(4, 2) == 6);
  CHECK(binomial(16, 13) == 560);
  CHECK(binomial(8, 6) == 28);
  CHECK(binomial(5, 0) == 1);
  CHECK(binomial(3, 4) == 0);
}

TEST_CASE("enumeration count and completeness") {
  const ModelConfig c = config_with_visual(4);
  const auto p = init_params(c, 1);
  Rng rng(2);
  const Tensor v = random_visual(c, rng);
  const std::vector<int> prompt{5, 6};
  const std::vector<int> prefix{20};
  const auto r = oracle_mask_search(p, c, v, prompt, prefix, 30, 2, 100.0, {.keep_all = true});
  CHECK(r.enumerated_count == 6);
  REQUIRE(r.all_scores.size() == 6);
  std::set<std::vector<int>> distinct;
  double best = -INFINITY;
  for (const auto& [m, s] : r.all_scores) {
    distinct.insert(m);
    best = std::max(best, s);
    CHECK(std::count(m.begin(), m.end(), 1) == 2);
  }
  CHECK(distinct.size() == 6);
  CHECK(r.best_score == best);
  CHECK(r.best_mask.retained() == 2);
  CHECK(r.best_mask.hard);
}

TEST_CASE("k equal to N yields the all-ones mask and the unmasked score") {
  const ModelConfig c = config_with_visual(6);
  const auto p = init_params(c, 3);
  Rng rng(4);
  const Tensor v = random_visual(c, rng);
  const std::vector<int> prompt{5, 6};
  const std::vector<int> prefix{};
  const auto r = oracle_mask_search(p, c, v, prompt, prefix, 17, 6, 100.0);
  CHECK(r.enumerated_count == 1);
  CHECK(r.best_mask.retained() == 6);
  const auto trace = forward(p, c, {&v, prompt, prefix});
  const double unmasked = 100.0 * attn_aggregate(trace, 2) +
                          (log_softmax(trace.logits).data[17] -
                           log_softmax(forward(p, c, {nullptr, prompt, prefix}).logits).data[17]);
  CHECK(r.best_score == doctest::Approx(unmasked).epsilon(1e-5));
}

TEST_CASE("oracle dominates heuristic masks") {
  const ModelConfig c = config_with_visual(8);
  Rng rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    const auto p = init_params(c, 10 + trial);
    const Tensor v = random_visual(c, rng);
    const std::vector<int> prompt{5, 6};
    const auto prefix = random_tokens(c, 2, rng);
    const int target = static_cast<int>(rng.below(256));
    const auto r = oracle_mask_search(p, c, v, prompt, prefix, target, 6, 100.0);
    CHECK(r.enumerated_count == 28);
    for (int h = 0; h < 10; ++h) {
      std::vector<int> bits(8, 1);
      std::size_t dropped = 0;
      while (dropped < 2) {
        const auto j = rng.below(8);
        if (bits[j]) {
          bits[j] = 0;
          ++dropped;
        }
      }
      const double s = oracle_score(p, c, v, prompt, prefix, target, SoftVisualMask::from_bits(bits), 100.0);
      CHECK(r.best_score >= s);
    }
    CHECK(oracle_score(p, c, v, prompt, prefix, target, r.best_mask, 100.0) == r.best_score);
  }
}

TEST_CASE("ties resolve to the lexicographically smallest mask") {
  // With zero attention weight and identical visual rows every mask scores the same.
  ModelConfig c = config_with_visual(5);
  const auto p = init_params(c, 6);
  Tensor v({5, 16}, Scalar(0.3));
  const std::vector<int> prompt{5, 6};
  const std::vector<int> prefix{};
  const auto r = oracle_mask_search(p, c, v, prompt, prefix, 40, 3, 0.0, {.keep_all = true});
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& [m, s] : r.all_scores) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  if (lo == hi) {
    std::vector<int> expected{0, 0, 1, 1, 1};
    std::vector<int> got;
    for (auto w : r.best_mask.weights.data) got.push_back(static_cast<int>(w));
    CHECK(got == expected);
  }
  // Enumeration order is increasing, so the first recorded mask is the smallest.
  CHECK(r.all_scores.front().first == std::vector<int>{0, 0, 1, 1, 1});
}

TEST_CASE("oracle errors") {
  const ModelConfig c;
  const auto p = init_params(c, 7);
  Rng rng(8);
  const Tensor v = random_visual(c, rng);
  const std::vector<int> prompt{5, 6};
  CHECK(code_of([&] { oracle_mask_search(p, c, v, prompt, {}, 3, 0, 100.0); }) == ErrorCode::kInvalidInput);
  CHECK(code_of([&] { oracle_mask_search(p, c, v, prompt, {}, 3, 17, 100.0); }) == ErrorCode::kInvalidInput);
  CHECK(code_of([&] { oracle_mask_search(p, c, v, prompt, {}, 3, 8, 100.0, {.cap = 1000}); }) ==
        ErrorCode::kEnumerationTooLarge);
  CHECK(code_of([&] { oracle_mask_search(p, c, v, prompt, {}, 300, 15, 100.0); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("learning-free decoding with gamma 1 equals baseline") {
  const ModelConfig c = config_with_visual(8);
  const auto p = init_params(c, 9);
  Rng rng(10);
  for (int scene = 0; scene < 3; ++scene) {
    const Tensor v = random_visual(c, rng);
    const std::vector<int> prompt{5, 6};
    DecodeConfig base;
    base.variant = Variant::kBaseline;
    base.max_new_tokens = 6;
    DecodeConfig lf = base;
    lf.variant = Variant::kLearningFree;
    lf.gamma = 1;
    lf.lambda = 0;
    CHECK(decode(p, c, nullptr, v, prompt, base).tokens == lf_decode(p, c, v, prompt, lf).tokens);
  }
}

TEST_CASE("learning-free decoding uses oracle masks") {
  const ModelConfig c = config_with_visual(8);
  const auto p = init_params(c, 11);
  Rng rng(12);
  const Tensor v = random_visual(c, rng);
  const std::vector<int> prompt{5, 6};
  DecodeConfig lf;
  lf.variant = Variant::kLearningFree;
  lf.gamma = 0.75;
  lf.max_new_tokens = 3;
  const auto r = decode(p, c, nullptr, v, prompt, lf);
  REQUIRE_FALSE(r.tokens.empty());
  std::vector<int> gen;
  for (std::size_t t = 0; t < r.tokens.size(); ++t) {
    CHECK(r.per_step[t].retained == 6);
    const int cand = greedy_candidate(p, c, v, prompt, gen);
    const auto o = oracle_mask_search(p, c, v, prompt, gen, cand, 6, lf.alpha);
    CHECK(o.best_mask.weights.data == r.masks[t].weights.data);
    gen.push_back(r.tokens[t]);
  }
  DecodeConfig wrong = lf;
  wrong.variant = Variant::kFull;
  CHECK(code_of([&] { lf_decode(p, c, v, prompt, wrong); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("factorization identity on random triples") {
  const ModelConfig c;
  const auto p = init_params(c, 13);
  Rng rng(14);
  const auto single = verify_factorization(p, c, 1, rng);
  CHECK(single.trials == 1);
  CHECK(single.max_deviation < 1e-5);
  const auto many = verify_factorization(p, c, 10, rng);
  CHECK(many.max_deviation < 1e-4);
  CHECK(many.max_abs_side > 0);
  CHECK(code_of([&] { verify_factorization(p, c, 0, rng); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("factorization with the visual pathway cut everywhere") {
  ModelConfig c;
  c.purify_layer = 0;
  const auto p = init_params(c, 15);
  Rng rng(16);
  const SoftVisualMask none{Tensor({16}), true};
  const auto r = verify_factorization(p, c, 5, rng, &none);
  CHECK(r.max_deviation < 1e-5);
  CHECK(r.max_abs_side < 1e-5);
}

TEST_CASE("factorization over fresh random models") {
  ModelConfig c;
  const auto r = verify_factorization_random(c, 5, 3);
  CHECK(r.trials == 5);
  CHECK(r.max_deviation < 1e-4);
  CHECK(r.to_json().at("trials") == 5);
}
