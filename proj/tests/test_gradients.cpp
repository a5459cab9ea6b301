// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Finite-difference checks. This binary links the double-precision core so
// central differences resolve the 1e-3 relative tolerance.

#include <cmath>

#include "autograd.hpp"
#include "doctest.h"
#include "purifier.hpp"
#include "rng.hpp"

using namespace cmivld;

static_assert(sizeof(Scalar) == 8, "gradient checks must run on the f64 core");

namespace {

Var random_param(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * scale;
  return ag::param(std::move(t));
}

}  // namespace

TEST_CASE("quadratic form gradcheck is exact to roundoff") {
  Rng rng(1);
  auto x = random_param({1, 4}, rng);
  auto a = random_param({4, 4}, rng);
  auto f = [&] { return ag::sum(ag::mul(ag::matmul(x, a), x)); };
  CHECK(gradcheck(f, {x}, 1e-3) < 1e-6);
}

TEST_CASE("three-layer MLP gradients match central differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(100 + seed);
    auto x = ag::constant(Tensor({5, 6}));
    for (auto& v : x->value.data) v = rng.normal();
    auto w1 = random_param({6, 8}, rng, 0.5);
    auto b1 = random_param({8}, rng, 0.1);
    auto w2 = random_param({8, 8}, rng, 0.5);
    auto b2 = random_param({8}, rng, 0.1);
    auto w3 = random_param({8, 3}, rng, 0.5);
    auto b3 = random_param({3}, rng, 0.1);
    const int targets[] = {0, 2, 1, 1, 0};
    auto f = [&] {
      auto h = ag::gelu(ag::linear(x, w1, b1));
      h = ag::tanh(ag::linear(h, w2, b2));
      auto logits = ag::linear(h, w3, b3);
      return ag::scale(ag::mean(ag::pick(ag::log_softmax_rows(logits), targets)), -1);
    };
    CHECK(gradcheck(f, {w1, b1, w2, b2, w3, b3}, 1e-4) < 1e-3);
  }
}

TEST_CASE("layer norm, attention and masking ops match central differences") {
  Rng rng(7);
  const std::size_t n = 5, heads = 2, width = 6;
  auto x = random_param({n, width}, rng);
  auto g = random_param({width}, rng);
  auto b = random_param({width}, rng);
  auto wq = random_param({width, width}, rng, 0.5);
  auto wk = random_param({width, width}, rng, 0.5);
  auto wv = random_param({width, width}, rng, 0.5);
  Tensor mt({3});
  for (auto& v : mt.data) v = 0.2 + 0.6 * rng.uniform();
  auto mask = ag::param(mt);
  auto f = [&] {
    auto h = ag::layer_norm(x, g, b);
    auto bias = ag::concat({ag::log_clamped(mask, 1e-10), ag::constant(Tensor({n - 3}))});
    auto p = ag::attention_probs(ag::matmul(h, wq), ag::matmul(h, wk), bias, heads, true);
    auto out = ag::attention_apply(p, ag::matmul(h, wv), heads);
    auto s = ag::sum(ag::mul(out, out));
    auto last = ag::sum(ag::slice_rows(ag::softmax_rows(out), n - 1, n));
    return ag::add(s, ag::add(last, ag::sum(ag::column(ag::remove_rows(out, std::vector<std::size_t>{1}), 2))));
  };
  CHECK(gradcheck(f, {x, g, b, wq, wk, wv, mask}, 1e-4) < 1e-3);
}

TEST_CASE("gumbel softmax gradient with frozen noise") {
  Rng rng(5);
  auto logits = random_param({4, 2}, rng);
  Tensor noise = ag::gumbel_noise({4, 2}, rng);
  auto f = [&] {
    auto m = ag::column(ag::gumbel_softmax(logits, noise, 0.5), 1);
    return ag::add(ag::sum(ag::mul(m, m)), ag::abs(ag::add_scalar(ag::mean(m), -0.1)));
  };
  CHECK(gradcheck(f, {logits}, 1e-4) < 1e-3);
}

TEST_CASE("purifier training loss gradient on random configurations") {
  const auto r = purifier_loss_gradcheck(5, 21);
  CHECK(r.per_config.size() == 5);
  CHECK(r.max_rel_error < 1e-3);
}
