// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "cpmi.hpp"
#include "doctest.h"
#include "purifier.hpp"
#include "test_util.hpp"

using namespace cmivld;
using namespace cmivld::testing;

namespace {

MaskDistribution dist(std::vector<std::pair<Scalar, Scalar>> rows) {
  Tensor pi({rows.size(), 2});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    pi.data[2 * r] = rows[r].first;
    pi.data[2 * r + 1] = rows[r].second;
  }
  return {pi};
}

std::vector<int> bits_of(const SoftVisualMask& m) {
  std::vector<int> b;
  for (auto w : m.weights.data) b.push_back(static_cast<int>(w));
  return b;
}

struct Fixture {
  ModelConfig config;
  TinyLvlmParams params;
  Purifier purifier;
  Tensor visual;
  std::vector<int> prompt{5, 6};
  std::vector<int> y;

  explicit Fixture(std::uint64_t seed) {
    params = init_params(config, seed);
    purifier.config = PurifierConfig::for_model(config);
    purifier.params = init_purifier(purifier.config, seed + 1);
    Rng rng(seed + 2);
    visual = random_visual(config, rng);
    y = random_tokens(config, 5, rng);
  }
};

}  // namespace

TEST_CASE("purifier stays under one percent of the model") {
  const ModelConfig c;
  const PurifierConfig pc = PurifierConfig::for_model(c);
  const PurifierParams pp = init_purifier(pc, 1);
  const std::size_t model_count = init_params(c, 1).parameter_count();
  CHECK(pp.parameter_count() * 100 < model_count);
  CHECK_NOTHROW(check_compatible(pc, pp, c, model_count));

  PurifierConfig big = pc;
  big.d_hidden = 64;
  big.mlp_hidden = 256;
  const PurifierParams bp = init_purifier(big, 1);
  CHECK(code_of([&] { check_compatible(big, bp, c, model_count); }) == ErrorCode::kInvalidConfig);

  PurifierConfig wrong = pc;
  wrong.d_model = 32;
  const PurifierParams wp = init_purifier(wrong, 1);
  CHECK(code_of([&] { check_compatible(wrong, wp, c, model_count); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("zero-initialized head gives uniform rows") {
  Fixture f(3);
  for (auto& v : f.purifier.params.head_w->value.data) v = 0;
  const Tensor z = context_embeddings(f.params, f.config, {&f.visual, f.prompt, f.y});
  const MaskDistribution d = purifier_forward(f.purifier.params, f.purifier.config, z);
  REQUIRE(d.size() == 16);
  for (std::size_t j = 0; j < 16; ++j) {
    CHECK(d.pi.at(j, 0) == 0.5);
    CHECK(d.pi.at(j, 1) == 0.5);
  }
  CHECK(bits_of(extract_mask(d)) == std::vector<int>(16, 1));
}

TEST_CASE("purifier input width must match") {
  Fixture f(4);
  const Tensor z({20, 32});
  CHECK(code_of([&] { purifier_forward(f.purifier.params, f.purifier.config, z); }) ==
        ErrorCode::kInvalidConfig);
}

TEST_CASE("purifier symmetry and context sensitivity") {
  Fixture f(5);
  Rng rng(6);
  for (auto& v : f.purifier.params.head_w->value.data) v = static_cast<Scalar>(rng.normal());
  const std::vector<int> gen{30, 40, 50};
  Tensor z = context_embeddings(f.params, f.config, {&f.visual, f.prompt, gen});
  const auto base = purifier_forward(f.purifier.params, f.purifier.config, z);
  for (std::size_t r = 0; r < base.size(); ++r) {
    CHECK(base.pi.at(r, 0) + base.pi.at(r, 1) == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_NOTHROW(base.validate());

  // Reordering text content changes the prediction.
  const std::vector<int> reordered{50, 40, 30};
  const Tensor z2 = context_embeddings(f.params, f.config, {&f.visual, f.prompt, reordered});
  CHECK(purifier_forward(f.purifier.params, f.purifier.config, z2).pi.data != base.pi.data);

  // Swapping two identical visual rows leaves pi unchanged.
  const std::size_t d = z.cols();
  for (std::size_t c = 0; c < d; ++c) z.data[5 * d + c] = z.data[2 * d + c];
  const auto before = purifier_forward(f.purifier.params, f.purifier.config, z);
  Tensor swapped = z;
  for (std::size_t c = 0; c < d; ++c) std::swap(swapped.data[2 * d + c], swapped.data[5 * d + c]);
  CHECK(purifier_forward(f.purifier.params, f.purifier.config, swapped).pi.data == before.pi.data);
}

TEST_CASE("extract_mask fixtures") {
  CHECK(bits_of(extract_mask(dist({{0.3f, 0.7f}, {0.6f, 0.4f}}))) == std::vector<int>{1, 0});
  CHECK(bits_of(extract_mask(dist({{0.5f, 0.5f}}))) == std::vector<int>{1});
  CHECK(bits_of(extract_mask(dist({{0, 1}, {0, 1}, {0, 1}}))) == std::vector<int>{1, 1, 1});
  CHECK(extract_mask(dist({{0.3f, 0.7f}})).hard);
}

TEST_CASE("extract_mask equals row-wise argmax with ties kept") {
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<std::pair<Scalar, Scalar>> rows;
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar keep = rng.bernoulli(0.1) ? Scalar(0.5) : static_cast<Scalar>(rng.uniform());
      rows.emplace_back(1 - keep, keep);
    }
    const auto m = extract_mask(dist(rows));
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(m.weights.data[j] == (rows[j].second >= rows[j].first ? 1 : 0));
    }
  }
}

TEST_CASE("top-k mask keeps the k most retained tokens") {
  const auto d = dist({{0.9f, 0.1f}, {0.2f, 0.8f}, {0.5f, 0.5f}, {0.5f, 0.5f}, {0.1f, 0.9f}});
  CHECK(bits_of(top_k_mask(d, 2)) == std::vector<int>{0, 1, 0, 0, 1});
  CHECK(bits_of(top_k_mask(d, 3)) == std::vector<int>{0, 1, 1, 0, 1});
  CHECK(bits_of(top_k_mask(d, 5)) == std::vector<int>(5, 1));
  CHECK(code_of([&] { top_k_mask(d, 0); }) == ErrorCode::kInvalidInput);
  CHECK(retained_count(0.8, 16) == 13);
  CHECK(retained_count(0.75, 8) == 6);
  CHECK(retained_count(1.0, 16) == 16);
  CHECK(retained_count(0.01, 16) == 1);
}

TEST_CASE("retention penalty fixtures and shape") {
  Tensor six({8});
  for (std::size_t j = 0; j < 6; ++j) six.data[j] = 1;
  CHECK(retention_penalty(six, 0.8) == doctest::Approx(0.05).epsilon(1e-12));
  Tensor exact({10}, Scalar(0.8));
  CHECK(retention_penalty(exact, 0.8) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(retention_penalty(Tensor({10}, Scalar(1)), 0.8) == doctest::Approx(0.2).epsilon(1e-12));
  // Strictly increasing in |fraction - gamma|.
  double prev = -1;
  for (int k = 8; k <= 10; ++k) {
    Tensor w({10});
    for (int j = 0; j < k; ++j) w.data[static_cast<std::size_t>(j)] = 1;
    const double p = retention_penalty(w, 0.8);
    CHECK(p > prev);
    prev = p;
  }
  const Var v = ag::constant(six);
  CHECK(retention_penalty(v, 0.8)->value.data[0] == doctest::Approx(0.05).epsilon(1e-6));
}

TEST_CASE("loss reduces to the negative step log-ratio") {
  Fixture f(8);
  TrainConfig tc;
  tc.alpha = 0;
  tc.beta = 0;
  for (std::size_t t = 0; t < f.y.size(); ++t) {
    const StepExample ex{&f.visual, f.prompt, f.y, t};
    const ObjectiveTerms terms = mask_objective(f.params, f.config, ex, ag::constant(Tensor({16}, 1)), tc);
    const std::span<const int> ys(f.y);
    const double ratio = step_log_prob(f.params, f.config, &f.visual, f.prompt, ys.first(t), f.y[t]) -
                         step_log_prob(f.params, f.config, nullptr, f.prompt, ys.first(t), f.y[t]);
    CHECK(std::abs(terms.loss->value.data[0] + ratio) < 1e-5);
    CHECK(std::abs(terms.log_ratio - ratio) < 1e-5);
  }
}

TEST_CASE("training loss components") {
  Fixture f(9);
  TrainConfig tc;
  Rng rng(10);
  const StepExample ex{&f.visual, f.prompt, f.y, 2};
  const ObjectiveTerms t = training_loss(f.params, f.config, f.purifier.params, f.purifier.config, ex, tc, rng);
  const double expect = -(t.log_ratio + tc.alpha * t.attention) + tc.beta * t.penalty;
  CHECK(t.loss->value.data[0] == doctest::Approx(expect).epsilon(1e-4));
  CHECK(t.attention >= 0);
  CHECK(t.attention <= 1);

  tc.attention = AttentionSource::kUnmasked;
  Rng rng2(10);
  const ObjectiveTerms u = training_loss(f.params, f.config, f.purifier.params, f.purifier.config, ex, tc, rng2);
  CHECK(u.log_ratio == doctest::Approx(t.log_ratio).epsilon(1e-6));
  CHECK(u.penalty == doctest::Approx(t.penalty).epsilon(1e-6));

  const StepExample bad{&f.visual, f.prompt, f.y, f.y.size()};
  CHECK(code_of([&] {
          training_loss(f.params, f.config, f.purifier.params, f.purifier.config, bad, tc, rng);
        }) == ErrorCode::kInvalidInput);
}

TEST_CASE("lower temperature moves soft masks toward the extracted mask") {
  // Averaged over a fixed set of noise draws, reused at every temperature.
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor logits({16, 2});
    for (auto& v : logits.data) v = static_cast<Scalar>(rng.normal() * 2);
    const auto hard = extract_mask({softmax(logits, 1)});
    std::vector<Tensor> noises;
    for (int k = 0; k < 2000; ++k) noises.push_back(ag::gumbel_noise({16, 2}, rng));
    double prev = INFINITY;
    for (Scalar tau : {1.0f, 0.5f, 0.1f}) {
      double l1 = 0;
      for (const auto& noise : noises) {
        const Var g = ag::gumbel_softmax(ag::constant(logits), noise, tau);
        for (std::size_t j = 0; j < 16; ++j) l1 += std::abs(g->value.at(j, 1) - hard.weights.data[j]);
      }
      l1 /= static_cast<double>(noises.size());
      CHECK(l1 <= prev);
      prev = l1;
    }
  }
}

TEST_CASE("purifier training is deterministic and respects config") {
  const ModelConfig c;
  const auto params = init_params(c, 2);
  Rng rng(13);
  std::vector<Tensor> scenes;
  for (int i = 0; i < 6; ++i) scenes.push_back(random_visual(c, rng));
  std::vector<TrainingExample> corpus;
  for (const auto& s : scenes) corpus.push_back({&s, {5, 6}, random_tokens(c, 4, rng)});
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 3;
  const PurifierConfig pc = PurifierConfig::for_model(c);
  PurifierParams a = init_purifier(pc, 4);
  PurifierParams b = init_purifier(pc, 4);
  const auto ra = train_purifier(params, c, a, pc, corpus, tc);
  train_purifier(params, c, b, pc, corpus, tc);
  CHECK(ra.epoch_loss.size() == 2);
  CHECK(ra.steps == 4);
  const auto na = a.named();
  const auto nb = b.named();
  for (std::size_t i = 0; i < na.size(); ++i) CHECK(na[i].second->value.data == nb[i].second->value.data);
  CHECK(na.back().second->value.data != init_purifier(pc, 4).head_b->value.data);

  CHECK(code_of([&] { train_purifier(params, c, a, pc, {}, tc); }) == ErrorCode::kInvalidInput);
  TrainConfig bad = tc;
  bad.gamma = 0;
  CHECK(code_of([&] { train_purifier(params, c, a, pc, corpus, bad); }) == ErrorCode::kInvalidConfig);
  bad = tc;
  bad.epochs = 0;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::kInvalidConfig);
}

TEST_CASE("purifier params round trip through named arrays") {
  const PurifierConfig pc;
  const PurifierParams p = init_purifier(pc, 5);
  std::vector<std::pair<std::string, Tensor>> arrays;
  for (const auto& [n, v] : p.named()) arrays.emplace_back(n, v->value);
  const PurifierParams q = purifier_from_arrays(pc, arrays);
  CHECK(q.parameter_count() == p.parameter_count());
  arrays.pop_back();
  CHECK(code_of([&] { purifier_from_arrays(pc, arrays); }) == ErrorCode::kCorruptCheckpoint);
  CHECK(PurifierConfig::from_json(pc.to_json()) == pc);
}
