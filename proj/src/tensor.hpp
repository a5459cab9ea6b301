// Copyright 2026 The cmivld Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <new>
#include <span>
#include <vector>

#include "precision.hpp"

CMIVLD_NS_BEGIN

// Vectorized reductions peel to the first aligned element, so their summation
// order depends on buffer alignment. A fixed alignment keeps results
// independent of where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlignment));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<Scalar, AlignedAllocator<Scalar>>;

/// Dense row-major tensor. `shape` may be empty for a scalar.
struct Tensor {
  std::vector<std::size_t> shape;
  Storage data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_in, Scalar fill = Scalar(0));
  Tensor(std::vector<std::size_t> shape_in, std::vector<Scalar> values);

  static Tensor scalar(Scalar v) { return Tensor({1}, std::vector<Scalar>{v}); }
  static Tensor vector(std::vector<Scalar> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  /// Rows/cols of a tensor viewed as [prod(shape[:-1]), shape[-1]].
  std::size_t rows() const;
  std::size_t cols() const;

  Scalar& operator[](std::size_t i) { return data[i]; }
  Scalar operator[](std::size_t i) const { return data[i]; }
  Scalar& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  Scalar at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<Scalar> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const Scalar> row(std::size_t r) const {
    return {data.data() + r * cols(), cols()};
  }

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// Softmax along `axis`, stabilized by max subtraction.
Tensor softmax(const Tensor& logits, std::size_t axis);

/// Log-softmax along the last axis.
Tensor log_softmax(const Tensor& logits);

CMIVLD_NS_END
