// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "error.hpp"

CMIVLD_NS_BEGIN

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape_in, Scalar fill)
    : shape(std::move(shape_in)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape_in, std::vector<Scalar> values)
    : shape(std::move(shape_in)), data(values.begin(), values.end()) {
  require(shape_numel(shape) == data.size(), ErrorCode::kInvalidInput,
          "tensor shape does not match data length");
}

Tensor Tensor::vector(std::vector<Scalar> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

std::size_t Tensor::rows() const {
  if (shape.empty()) return 1;
  return cols() == 0 ? 0 : numel() / cols();
}

std::size_t Tensor::cols() const { return shape.empty() ? 1 : shape.back(); }

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](Scalar v) { return std::isfinite(v); });
}

Tensor softmax(const Tensor& logits, std::size_t axis) {
  require(axis < logits.rank(), ErrorCode::kIndex,
          "softmax axis " + std::to_string(axis) + " out of range");
  require(logits.all_finite(), ErrorCode::kInvalidInput, "softmax input is not finite");
  std::size_t inner = 1;
  for (std::size_t a = axis + 1; a < logits.rank(); ++a) inner *= logits.shape[a];
  const std::size_t len = logits.shape[axis];
  const std::size_t outer = len == 0 ? 0 : logits.numel() / (len * inner);

  Tensor out(logits.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      Scalar mx = logits.data[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, logits.data[base + k * inner]);
      Scalar sum = 0;
      for (std::size_t k = 0; k < len; ++k) {
        const Scalar e = std::exp(logits.data[base + k * inner] - mx);
        out.data[base + k * inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < len; ++k) out.data[base + k * inner] /= sum;
    }
  }
  return out;
}

Tensor log_softmax(const Tensor& logits) {
  require(logits.all_finite(), ErrorCode::kInvalidInput, "log_softmax input is not finite");
  Tensor out(logits.shape);
  const std::size_t cols = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto dst = out.row(r);
    const Scalar mx = *std::max_element(in.begin(), in.end());
    double sum = 0;
    for (std::size_t c = 0; c < cols; ++c) sum += std::exp(static_cast<double>(in[c] - mx));
    const Scalar lse = mx + static_cast<Scalar>(std::log(sum));
    for (std::size_t c = 0; c < cols; ++c) dst[c] = in[c] - lse;
  }
  return out;
}

CMIVLD_NS_END
