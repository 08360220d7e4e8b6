// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "teq/autograd.hpp"
#include "teq/tensor.hpp"

namespace teq {

/// Symmetric weight quantization settings. Codes live in [-clip_n, clip_n]
/// with clip_n = 2^(n_bits-1) - 1; there is no zero point.
struct QuantSpec {
  int n_bits = 4;
  /// -1 means one group per whole line along `axis`; otherwise groups are
  /// contiguous runs of this many elements (the last one may be shorter).
  int group_size = -1;
  /// Axis holding the input channels. Groups run along it.
  std::size_t axis = 0;

  int clip_n() const { return (1 << (n_bits - 1)) - 1; }
  /// Throws ContractError for n_bits outside [2, 16] or group_size of 0 or < -1.
  void validate() const;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// Deterministic element -> group assignment for a rank-1 or rank-2 tensor.
/// Groups are numbered line by line, where a line is the run of elements
/// sharing every index except `axis`.
struct GroupMap {
  std::size_t lines = 0;
  std::size_t line_length = 0;
  std::size_t group_length = 0;
  std::size_t groups_per_line = 0;
  std::size_t axis = 0;
  std::size_t cols = 0;

  std::size_t num_groups() const { return lines * groups_per_line; }
  std::size_t group_of(std::size_t flat_index) const;
};

GroupMap make_group_map(const Shape& shape, const QuantSpec& spec);

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> codes;
  std::vector<float> scales;
  QuantSpec spec;

  GroupMap group_map() const { return make_group_map(shape, spec); }
};

/// Per-group scale max|w| / clip_n, snapped so that clip_n * s maps back to s
/// (which keeps fake quantization idempotent). All-zero groups get 1e-8.
/// Throws NumericDomainError on non-finite input.
std::vector<float> compute_scales(const Tensor& w, const QuantSpec& spec);

/// q = clip(round_half_away(v / s), -clip_n, clip_n) per element.
QuantizedTensor quantize(const Tensor& v, std::span<const float> scales, const QuantSpec& spec);
QuantizedTensor quantize(const Tensor& v, const QuantSpec& spec);

Tensor dequantize(const QuantizedTensor& qt);

/// dequantize(quantize(w, compute_scales(w))) without a tape.
Tensor fake_quant_values(const Tensor& w, const QuantSpec& spec);

/// Tape version of fake_quant_values; the backward pass is the identity
/// (straight-through estimator).
ag::Var fake_quant(ag::Var w, const QuantSpec& spec);

/// Backward rule used when training through fake quantization.
enum class SteMode {
  /// d fq / dw = I.
  kIdentity,
  /// round() is still passed straight through, but each group's step s(w)
  /// keeps its dependence on the group's max-abs element w_m:
  /// dL/dw_m += sign(w_m) / clip_n * sum_i g_i (q_i - w_i / s).
  kStepAware,
};

/// Per-element grid residual q - w/s (zero for all-zero groups).
Tensor rounding_residual(const Tensor& w, const QuantSpec& spec);

/// Forward equals fake_quant_values; backward follows `mode`.
ag::Var fake_quant(ag::Var w, const QuantSpec& spec, SteMode mode);

inline constexpr std::size_t kNoArgmax = static_cast<std::size_t>(-1);

/// Flat index of the first max-abs element of each group (kNoArgmax for
/// all-zero groups).
std::vector<std::size_t> group_argmax(const Tensor& w, const QuantSpec& spec);

/// Rounding state of one weight tensor held fixed at a reference point.
struct FrozenGrid {
  Tensor residual;
  std::vector<std::size_t> argmax;
};

FrozenGrid freeze_grid(const Tensor& w, const QuantSpec& spec);

/// Smooth surrogate w + s(w) * residual with s = |w[argmax]| / clip_n per
/// group, everything but w held fixed. Its exact derivative is the
/// kStepAware rule, so it serves as the finite-difference reference for
/// that mode.
ag::Var frozen_fake_quant(ag::Var w, const QuantSpec& spec, const FrozenGrid& grid);

/// Mean squared error between w and its fake-quantized copy.
double quant_mse(const Tensor& w, const QuantSpec& spec);

}  // namespace teq
