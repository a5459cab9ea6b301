// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "model.hpp"
#include "test_util.hpp"

using namespace cmivld;
using namespace cmivld::testing;

namespace {

// Runs layers >= purify_layer on the hidden state with the dropped visual
// rows deleted, then the output head on the last row.
Tensor removal_oracle(const TinyLvlmParams& p, const ModelConfig& c, const ModelInput& in,
                      const std::vector<int>& bits) {
  PrefixState pre = forward_prefix(p, c, in);
  std::vector<std::size_t> drop;
  for (std::size_t j = 0; j < bits.size(); ++j) {
    if (!bits[j]) drop.push_back(j);
  }
  Var x = ag::remove_rows(pre.hidden, drop);
  for (int l = c.purify_layer; l < c.n_layers; ++l) {
    x = transformer_layer(p.layers[static_cast<std::size_t>(l)],
                          static_cast<std::size_t>(c.n_heads), x, nullptr, true, nullptr);
  }
  x = ag::slice_rows(x, x->value.rows() - 1, x->value.rows());
  x = ag::layer_norm(x, p.lnf_g, p.lnf_b);
  return ag::linear(x, p.w_out, p.b_out)->value;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.d_head = 8;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::kInvalidConfig);
  c = ModelConfig{};
  c.purify_layer = c.n_layers;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::kInvalidConfig);
  c = ModelConfig{};
  c.n_visual = 0;
  CHECK(code_of([&] { c.validate(); }) == ErrorCode::kInvalidConfig);
  CHECK(ModelConfig::from_json(ModelConfig{}.to_json()) == ModelConfig{});
}

TEST_CASE("default model parameter count") {
  const ModelConfig c;
  const auto p = init_params(c, 1);
  CHECK(p.parameter_count() == 238272);
  for (const auto& v : p.all()) CHECK(v->value.all_finite());
}

TEST_CASE("all-ones mask is bitwise neutral") {
  const ModelConfig c;
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = init_params(c, 100 + trial);
    const Tensor v = random_visual(c, rng);
    const auto prompt = random_tokens(c, 3, rng);
    const auto gen = random_tokens(c, 4, rng);
    const auto ones = SoftVisualMask::ones(16);
    const auto a = forward(p, c, {&v, prompt, gen});
    const auto b = forward(p, c, {&v, prompt, gen}, &ones);
    CHECK(a.logits.data == b.logits.data);
  }
}

TEST_CASE("hard mask equals physical removal from the purify layer on") {
  const ModelConfig c;
  Rng rng(5);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = init_params(c, 1000 + trial);
    const Tensor v = random_visual(c, rng);
    const auto prompt = random_tokens(c, 2, rng);
    const auto gen = random_tokens(c, rng.below(6), rng);
    std::vector<int> bits(16);
    for (auto& b : bits) b = rng.bernoulli(0.6) ? 1 : 0;
    bits[rng.below(16)] = 1;
    const auto mask = SoftVisualMask::from_bits(bits);
    const ModelInput in{&v, prompt, gen};
    const auto masked = forward(p, c, in, &mask);
    const Tensor oracle = removal_oracle(p, c, in, bits);
    for (std::size_t k = 0; k < masked.logits.numel(); ++k) {
      worst = std::max(worst, std::abs(static_cast<double>(masked.logits.data[k] - oracle.data[k])));
    }
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("attention rows sum to one and are causal") {
  const ModelConfig c;
  Rng rng(9);
  const auto p = init_params(c, 2);
  const Tensor v = random_visual(c, rng);
  const auto prompt = random_tokens(c, 2, rng);
  const auto gen = random_tokens(c, 5, rng);
  std::vector<int> bits(16, 1);
  bits[3] = 0;
  const auto mask = SoftVisualMask::from_bits(bits);
  for (const SoftVisualMask* m : {static_cast<const SoftVisualMask*>(nullptr), &mask}) {
    const auto tr = forward(p, c, {&v, prompt, gen}, m);
    REQUIRE(tr.attention.size() == 4);
    for (const auto& a : tr.attention) {
      const std::size_t n = a.dim(1);
      CHECK(n == 16 + 2 + 5);
      for (std::size_t h = 0; h < a.dim(0); ++h) {
        for (std::size_t r = 0; r < n; ++r) {
          double s = 0;
          for (std::size_t q = 0; q < n; ++q) {
            const double w = a.data[(h * n + r) * n + q];
            if (q > r) CHECK(w == 0);
            s += w;
          }
          CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
        }
      }
    }
  }
}

TEST_CASE("causality: later tokens never change earlier logits") {
  const ModelConfig c;
  Rng rng(13);
  const auto p = init_params(c, 4);
  const Tensor v = random_visual(c, rng);
  const auto prompt = random_tokens(c, 2, rng);
  auto gen = random_tokens(c, 6, rng);
  const auto a = forward_graph(p, c, {&v, prompt, gen}, nullptr, LogitRows::kText);
  gen[4] = (gen[4] + 1) % c.vocab_size;
  const auto b = forward_graph(p, c, {&v, prompt, gen}, nullptr, LogitRows::kText);
  // Row r predicts token r of the generated stream; rows up to 4 only see gen[<4].
  const std::size_t vocab = static_cast<std::size_t>(c.vocab_size);
  for (std::size_t r = 0; r <= 4; ++r) {
    for (std::size_t k = 0; k < vocab; ++k) CHECK(a.logits->value.at(r, k) == b.logits->value.at(r, k));
  }
  bool later_changed = false;
  for (std::size_t k = 0; k < vocab; ++k) later_changed |= a.logits->value.at(5, k) != b.logits->value.at(5, k);
  CHECK(later_changed);
}

TEST_CASE("forward errors") {
  const ModelConfig c;
  Rng rng(1);
  const auto p = init_params(c, 1);
  const Tensor v = random_visual(c, rng);
  const std::vector<int> prompt{5, 6};
  const auto ones = SoftVisualMask::ones(16);
  CHECK(code_of([&] { forward(p, c, {nullptr, prompt, {}}, &ones); }) == ErrorCode::kInvalidInput);
  const auto long_gen = random_tokens(c, 47, rng);
  CHECK(code_of([&] { forward(p, c, {&v, prompt, long_gen}); }) == ErrorCode::kSequenceTooLong);
  const auto fits = random_tokens(c, 46, rng);
  CHECK_NOTHROW(forward(p, c, {&v, prompt, fits}));
  const auto short_mask = SoftVisualMask::ones(15);
  CHECK(code_of([&] { forward(p, c, {&v, prompt, {}}, &short_mask); }) == ErrorCode::kInvalidInput);
  const std::vector<int> bad{5, 999};
  CHECK(code_of([&] { forward(p, c, {&v, bad, {}}); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("text-only branch does not depend on image content") {
  const ModelConfig c;
  Rng rng(21);
  const auto p = init_params(c, 8);
  const std::vector<int> prompt{5, 6};
  const auto gen = random_tokens(c, 3, rng);
  const auto a = forward(p, c, {nullptr, prompt, gen});
  const Tensor v = random_visual(c, rng);
  (void)forward(p, c, {&v, prompt, gen});
  const auto b = forward(p, c, {nullptr, prompt, gen});
  CHECK(a.logits.data == b.logits.data);
  CHECK(a.layout.n_visual == 0);
}

TEST_CASE("attn_aggregate closed form") {
  ForwardTrace tr;
  tr.layout.n_visual = 2;
  tr.layout.prompt_len = 1;
  Tensor a({2, 3, 3});
  auto set_last = [&a](std::size_t h, std::vector<Scalar> row) {
    for (std::size_t q = 0; q < 3; ++q) a.data[(h * 3 + 2) * 3 + q] = row[q];
  };
  set_last(0, {0.1f, 0.2f, 0.7f});
  set_last(1, {0.3f, 0.4f, 0.3f});
  tr.attention = {a};
  CHECK(attn_aggregate(tr, 0) == doctest::Approx(0.5).epsilon(1e-6));
  SoftVisualMask zeros{Tensor({2}), true};
  CHECK(attn_aggregate(tr, 0, &zeros) == 0);
  const auto ones = SoftVisualMask::ones(2);
  CHECK(attn_aggregate(tr, 0, &ones) == attn_aggregate(tr, 0));
  CHECK(code_of([&] { attn_aggregate(tr, 1); }) == ErrorCode::kIndex);
}

TEST_CASE("attn_aggregate on a random trace lies in [0, 1]") {
  const ModelConfig c;
  Rng rng(2);
  const auto p = init_params(c, 3);
  const Tensor v = random_visual(c, rng);
  const std::vector<int> prompt{5, 6};
  const auto tr = forward(p, c, {&v, prompt, {}});
  const auto ones = SoftVisualMask::ones(16);
  for (std::size_t l = 0; l < 4; ++l) {
    const Scalar s = attn_aggregate(tr, l);
    CHECK(s >= 0);
    CHECK(s <= 1);
    CHECK(attn_aggregate(tr, l, &ones) == s);
  }
}

TEST_CASE("soft mask validation") {
  CHECK(code_of([] { SoftVisualMask{Tensor::vector({0.5f, 1.5f}), false}.validate(); }) ==
        ErrorCode::kInvalidInput);
  CHECK(code_of([] { SoftVisualMask{Tensor::vector({0.5f, 1.0f}), true}.validate(); }) ==
        ErrorCode::kInvalidInput);
  CHECK_NOTHROW(SoftVisualMask{Tensor::vector({0.5f, 1.0f}), false}.validate());
  const std::vector<int> bits{1, 0, 1};
  CHECK(SoftVisualMask::from_bits(bits).retained() == 2);
}

TEST_CASE("training memorizes a single example") {
  const ModelConfig c = small_config();
  Rng rng(4);
  const Tensor v = random_visual(c, rng);
  std::vector<TrainingExample> corpus{{&v, {5, 6}, {17, 20, 2}}};
  auto p = init_params(c, 12);
  LvlmTrainOptions o;
  o.epochs = 200;
  o.learning_rate = 1e-2;
  const auto report = train_lvlm(p, c, corpus, o);
  CHECK(report.steps == 200);
  CHECK(report.final_loss < report.initial_loss);
  const std::vector<int>& y = corpus[0].target;
  std::span<const int> ys(y);
  const double with_image = example_loss(p, c, {&v, corpus[0].prompt, ys.first(2)}, y)->value.data[0];
  const double without = example_loss(p, c, {nullptr, corpus[0].prompt, ys.first(2)}, y)->value.data[0];
  CHECK(with_image < 0.1);
  CHECK(without < 0.1);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const ModelConfig c = small_config();
  Rng rng(6);
  const Tensor v1 = random_visual(c, rng);
  const Tensor v2 = random_visual(c, rng);
  std::vector<TrainingExample> corpus{{&v1, {5}, {17, 2}}, {&v2, {5}, {18, 19, 2}}};
  LvlmTrainOptions o;
  o.epochs = 5;
  o.batch_size = 1;
  o.seed = 77;
  auto a = init_params(c, 1);
  auto b = init_params(c, 1);
  train_lvlm(a, c, corpus, o);
  train_lvlm(b, c, corpus, o);
  const auto na = a.named();
  const auto nb = b.named();
  for (std::size_t i = 0; i < na.size(); ++i) CHECK(na[i].second->value.data == nb[i].second->value.data);
}

TEST_CASE("training rejects an empty corpus") {
  const ModelConfig c = small_config();
  auto p = init_params(c, 1);
  CHECK(code_of([&] { train_lvlm(p, c, {}, {}); }) == ErrorCode::kInvalidInput);
}

TEST_CASE("params round trip through named arrays") {
  const ModelConfig c = small_config();
  const auto p = init_params(c, 9);
  std::vector<std::pair<std::string, Tensor>> arrays;
  for (const auto& [n, v] : p.named()) arrays.emplace_back(n, v->value);
  const auto q = params_from_arrays(c, arrays);
  const auto nq = q.named();
  for (std::size_t i = 0; i < arrays.size(); ++i) CHECK(nq[i].second->value.data == arrays[i].second.data);
  arrays[0].second.shape[0] += 1;
  CHECK(code_of([&] { params_from_arrays(c, arrays); }) == ErrorCode::kCorruptCheckpoint);
}
