// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace teq {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major FP32 array. A rank-0 shape holds one element.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  /// Throws DimensionError when data.size() != product(shape).
  Tensor(Shape shape, std::vector<float> data);

  static Tensor scalar(float value) { return Tensor(Shape{}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  /// Leading dimensions collapsed: a [b, t, d] tensor is rows()=b*t, cols()=d.
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  const std::vector<float>& values() const noexcept { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  float item() const;
  bool all_finite() const noexcept;

  /// Same data, new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Bitwise comparison (distinguishes -0.0 from 0.0 and compares NaN payloads).
bool bitwise_equal(const Tensor& a, const Tensor& b);

/// Largest |a-b| / max(|b|, floor) over all elements.
double max_relative_diff(const Tensor& a, const Tensor& b, double floor = 1e-12);

namespace kernels {

/// c[m×n] = a[m×k] · b[k×n]. Each output accumulates in double in ascending
/// k from zero and is rounded to float once, so the result is bit-identical
/// to the textbook triple loop with a double accumulator.
void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c,
            std::size_t m, std::size_t k, std::size_t n);

void transpose(std::span<const float> a, std::span<float> out, std::size_t rows, std::size_t cols);

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

}  // namespace teq
