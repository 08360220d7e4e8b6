// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "teq/errors.hpp"

namespace teq {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) { return fmt::format("[{}]", fmt::join(shape, "x")); }

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError(fmt::format("shape {} needs {} values, got {}", shape_string(shape_),
                                     shape_numel(shape_), data_.size()));
  }
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 1;
  return data_.empty() ? 0 : data_.size() / shape_.back();
}

std::size_t Tensor::cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }

float Tensor::item() const {
  if (data_.size() != 1) {
    throw DimensionError(fmt::format("item() on tensor of shape {}", shape_string(shape_)));
  }
  return data_[0];
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw DimensionError(fmt::format("cannot reshape {} to {}", shape_string(shape_), shape_string(shape)));
  }
  return Tensor(std::move(shape), data_);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}

double max_relative_diff(const Tensor& a, const Tensor& b, double floor) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("cannot compare {} with {}", shape_string(a.shape()), shape_string(b.shape())));
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double diff = std::abs(double(a[i]) - double(b[i]));
    worst = std::max(worst, diff / std::max(std::abs(double(b[i])), floor));
  }
  return worst;
}

namespace kernels {

void matmul(std::span<const float> a, std::span<const float> b, std::span<float> c, std::size_t m,
            std::size_t k, std::size_t n) {
  // i-k-j order: every c[i][j] still sums its products in ascending k,
  // but the inner loop runs over contiguous j and vectorizes. Products of
  // floats are exact in double, so each output is rounded once.
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* arow = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const float* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * double(brow[j]);
    }
    float* crow = c.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] = float(acc[j]);
  }
}

void transpose(std::span<const float> a, std::span<float> out, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  }
}

}  // namespace kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError(
        fmt::format("matmul shape mismatch: {} x {}", shape_string(a.shape()), shape_string(b.shape())));
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::matmul(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(fmt::format("transpose needs rank 2, got {}", shape_string(a.shape())));
  Tensor out({a.dim(1), a.dim(0)});
  kernels::transpose(a.data(), out.data(), a.dim(0), a.dim(1));
  return out;
}

}  // namespace teq
