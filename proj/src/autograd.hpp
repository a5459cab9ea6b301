// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

// Define-by-run reverse-mode automatic differentiation over Tensor values.
//
// Every op returns a fresh Node. When none of its inputs require gradients the
// node keeps no parents and no backward closure, so inference through the same
// code path records nothing. A graph is owned by the thread that builds it.

#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

CMIVLD_NS_BEGIN

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  bool has_grad() const { return !grad.data.empty(); }

  /// Gradient buffer, zero-initialized on first use.
  Tensor& grad_buffer() {
    if (grad.data.empty()) grad = Tensor(value.shape);
    return grad;
  }

  void zero_grad() { grad = Tensor(); }
};

namespace ag {

Var param(Tensor value);
Var constant(Tensor value);

/// Builds a result node. Parents and the closure are dropped when no parent
/// requires gradients.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Runs reverse accumulation from a scalar root. Leaf gradients accumulate
/// across calls; intermediate gradients are rebuilt each time.
void backward(const Var& root);

// Linear algebra.
Var matmul(const Var& a, const Var& b);
Var linear(const Var& x, const Var& weight, const Var& bias);

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Scalar s);
Var add_scalar(const Var& a, Scalar s);
Var abs(const Var& a);
Var gelu(const Var& a);
Var tanh(const Var& a);
Var log_clamped(const Var& a, Scalar floor);

// Row-wise (last axis).
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, Scalar eps = Scalar(1e-5));

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);

// Indexing and layout.
Var embedding(const Var& table, std::span<const int> ids);
Var concat(const std::vector<Var>& parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var remove_rows(const Var& a, std::span<const std::size_t> rows);
Var column(const Var& a, std::size_t c);
Var pick(const Var& a, std::span<const int> targets);
Var element(const Var& a, std::size_t index);

/// Multi-head scaled dot-product attention probabilities, shape [H, n, n].
/// `q` and `k` are [n, H*d]. `column_bias` (optional, [n]) is added to the
/// logit of every query toward key j. With `causal`, keys after the query get
/// probability exactly zero.
Var attention_probs(const Var& q, const Var& k, const Var& column_bias, std::size_t n_heads,
                    bool causal);

/// Mixes values [n, H*d] with probabilities [H, n, n] into [n, H*d].
Var attention_apply(const Var& probs, const Var& v, std::size_t n_heads);

/// Gumbel-Softmax over rows of `logits` [N, K]: softmax((logits + g) / tau).
/// `noise` carries the Gumbel draws explicitly so callers can freeze it.
Var gumbel_softmax(const Var& logits, const Tensor& noise, Scalar tau);
Var gumbel_softmax(const Var& logits, Scalar tau, Rng& rng);

/// Standard Gumbel noise tensor of the given shape.
Tensor gumbel_noise(const std::vector<std::size_t>& shape, Rng& rng);

}  // namespace ag

/// Max over parameters of |analytic - central difference| / max(|a|, |d|, 1e-8).
/// `f` rebuilds the graph from the current parameter values and returns the
/// scalar root; it must be deterministic.
double gradcheck(const std::function<Var()>& f, const std::vector<Var>& params, double h);

/// Max over parameter tensors of ||analytic - numeric|| / max(||analytic||,
/// ||numeric||, 1e-8). Insensitive to roundoff on near-zero entries.
double gradcheck_norm(const std::function<Var()>& f, const std::vector<Var>& params, double h);

CMIVLD_NS_END
