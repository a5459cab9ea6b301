// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "autograd.hpp"
#include "error.hpp"

CMIVLD_NS_BEGIN

/// Adaptive-moment gradient descent over a fixed parameter list.
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // global L2 norm; 0 disables
  };

  Adam(std::vector<Var> params, Options options) : params_(std::move(params)), opt_(options) {
    for (const auto& p : params_) {
      m_.emplace_back(p->value.numel(), 0.0);
      v_.emplace_back(p->value.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  /// Applies one update using the accumulated gradients scaled by `grad_scale`.
  void step(double grad_scale = 1.0) {
    ++t_;
    double clip = 1.0;
    if (opt_.grad_clip > 0) {
      double norm2 = 0;
      for (const auto& p : params_) {
        if (!p->has_grad()) continue;
        for (auto g : p->grad.data) norm2 += (g * grad_scale) * (g * grad_scale);
      }
      const double norm = std::sqrt(norm2);
      if (norm > opt_.grad_clip) clip = opt_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      if (!p.has_grad()) continue;
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double g = static_cast<double>(p.grad.data[i]) * grad_scale * clip;
        m_[k][i] = opt_.beta1 * m_[k][i] + (1 - opt_.beta1) * g;
        v_[k][i] = opt_.beta2 * v_[k][i] + (1 - opt_.beta2) * g * g;
        const double update =
            opt_.learning_rate * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + opt_.eps);
        p.value.data[i] = static_cast<Scalar>(p.value.data[i] - update);
        require(std::isfinite(p.value.data[i]), ErrorCode::kNumerical,
                "optimizer: parameters diverged to a non-finite value");
      }
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<Var> params_;
  Options opt_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long t_ = 0;
};

CMIVLD_NS_END
