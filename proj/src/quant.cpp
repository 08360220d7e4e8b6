// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/quant.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "teq/errors.hpp"

namespace teq {

namespace {

constexpr float kZeroGroupScale = 1e-8f;

}  // namespace

void QuantSpec::validate() const {
  if (n_bits < 2 || n_bits > 16) throw ContractError(fmt::format("n_bits must be in [2, 16], got {}", n_bits));
  if (group_size == 0 || group_size < -1) {
    throw ContractError(fmt::format("group_size must be -1 or positive, got {}", group_size));
  }
}

std::size_t GroupMap::group_of(std::size_t flat_index) const {
  std::size_t line, pos;
  if (axis == 0) {
    // Column-major lines: element (r, c) lies on line c at position r.
    line = flat_index % cols;
    pos = flat_index / cols;
  } else {
    line = flat_index / line_length;
    pos = flat_index % line_length;
  }
  return line * groups_per_line + pos / group_length;
}

GroupMap make_group_map(const Shape& shape, const QuantSpec& spec) {
  spec.validate();
  GroupMap m;
  if (shape.size() == 1) {
    if (spec.axis != 0) throw DimensionError(fmt::format("axis {} invalid for rank-1 tensor", spec.axis));
    m.lines = 1;
    m.line_length = shape[0];
    m.axis = 1;
    m.cols = shape[0];
  } else if (shape.size() == 2) {
    if (spec.axis > 1) throw DimensionError(fmt::format("axis {} invalid for rank-2 tensor", spec.axis));
    m.axis = spec.axis;
    m.cols = shape[1];
    m.line_length = shape[spec.axis];
    m.lines = shape[1 - spec.axis];
  } else {
    throw DimensionError(fmt::format("quantization supports rank 1 or 2, got {}", shape_string(shape)));
  }
  if (m.line_length == 0) throw DimensionError("cannot quantize an empty tensor");
  m.group_length = spec.group_size < 0 ? m.line_length
                                       : std::min<std::size_t>(std::size_t(spec.group_size), m.line_length);
  m.groups_per_line = (m.line_length + m.group_length - 1) / m.group_length;
  return m;
}

std::vector<float> compute_scales(const Tensor& w, const QuantSpec& spec) {
  const GroupMap map = make_group_map(w.shape(), spec);
  std::vector<float> max_abs(map.num_groups(), 0.0f);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (!std::isfinite(w[i])) throw NumericDomainError(fmt::format("compute_scales: non-finite value at {}", i));
    float& m = max_abs[map.group_of(i)];
    m = std::max(m, std::abs(w[i]));
  }
  const float n = float(spec.clip_n());
  std::vector<float> scales(max_abs.size());
  for (std::size_t g = 0; g < scales.size(); ++g) {
    if (max_abs[g] == 0.0f) {
      scales[g] = kZeroGroupScale;
      continue;
    }
    const float s = max_abs[g] / n;
    // fl(fl(n*s)/n) is a fixed point of the same map, so re-deriving the
    // scale from an already fake-quantized tensor reproduces it exactly.
    const float snapped = (n * s) / n;
    scales[g] = std::isfinite(snapped) ? snapped : s;
  }
  return scales;
}

QuantizedTensor quantize(const Tensor& v, std::span<const float> scales, const QuantSpec& spec) {
  const GroupMap map = make_group_map(v.shape(), spec);
  if (scales.size() != map.num_groups()) {
    throw DimensionError(fmt::format("quantize: {} scales for {} groups", scales.size(), map.num_groups()));
  }
  for (std::size_t g = 0; g < scales.size(); ++g) {
    if (!(scales[g] > 0.0f)) throw ContractError(fmt::format("quantize: scale {} of group {} is not positive", scales[g], g));
  }
  const float n = float(spec.clip_n());
  QuantizedTensor qt{v.shape(), std::vector<std::int32_t>(v.numel()), {scales.begin(), scales.end()}, spec};
  for (std::size_t i = 0; i < v.numel(); ++i) {
    const float r = std::round(v[i] / scales[map.group_of(i)]);
    qt.codes[i] = std::int32_t(std::clamp(r, -n, n));
  }
  return qt;
}

QuantizedTensor quantize(const Tensor& v, const QuantSpec& spec) { return quantize(v, compute_scales(v, spec), spec); }

Tensor dequantize(const QuantizedTensor& qt) {
  const GroupMap map = qt.group_map();
  if (qt.codes.size() != shape_numel(qt.shape) || qt.scales.size() != map.num_groups()) {
    throw DimensionError("dequantize: codes/scales do not match the declared shape");
  }
  Tensor out(qt.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = float(qt.codes[i]) * qt.scales[map.group_of(i)];
  return out;
}

Tensor fake_quant_values(const Tensor& w, const QuantSpec& spec) { return dequantize(quantize(w, spec)); }

ag::Var fake_quant(ag::Var w, const QuantSpec& spec) {
  return w.tape().record(fake_quant_values(w.value(), spec), {w}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < g.numel(); ++i) (*grads[0])[i] += g[i];
  });
}

Tensor rounding_residual(const Tensor& w, const QuantSpec& spec) {
  const QuantizedTensor qt = quantize(w, spec);
  const GroupMap map = qt.group_map();
  Tensor out(w.shape());
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const float s = qt.scales[map.group_of(i)];
    if (s != kZeroGroupScale) out[i] = float(qt.codes[i]) - w[i] / s;
  }
  return out;
}

std::vector<std::size_t> group_argmax(const Tensor& w, const QuantSpec& spec) {
  const GroupMap map = make_group_map(w.shape(), spec);
  std::vector<std::size_t> argmax(map.num_groups(), kNoArgmax);
  std::vector<float> max_abs(map.num_groups(), 0.0f);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const std::size_t g = map.group_of(i);
    if (std::abs(w[i]) > max_abs[g]) {
      max_abs[g] = std::abs(w[i]);
      argmax[g] = i;
    }
  }
  return argmax;
}

namespace {

// Adds the step-size term of the kStepAware rule to `grad`.
void add_step_gradient(const Tensor& w, const Tensor& residual, const std::vector<std::size_t>& argmax,
                       const QuantSpec& spec, const Tensor& g, Tensor& grad) {
  const GroupMap map = make_group_map(w.shape(), spec);
  std::vector<double> weighted(map.num_groups(), 0.0);
  for (std::size_t i = 0; i < w.numel(); ++i) weighted[map.group_of(i)] += double(g[i]) * double(residual[i]);
  const double n = double(spec.clip_n());
  for (std::size_t gi = 0; gi < argmax.size(); ++gi) {
    if (argmax[gi] == kNoArgmax) continue;
    const double sign = w[argmax[gi]] < 0.0f ? -1.0 : 1.0;
    grad[argmax[gi]] += float(sign / n * weighted[gi]);
  }
}

ag::Var record_step_aware(ag::Var w, Tensor forward, const QuantSpec& spec, Tensor residual,
                          std::vector<std::size_t> argmax) {
  return w.tape().record(std::move(forward), {w},
                         [wv = w.value(), spec, residual = std::move(residual), argmax = std::move(argmax)](
                             const Tensor& g, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (std::size_t i = 0; i < g.numel(); ++i) (*grads[0])[i] += g[i];
                           add_step_gradient(wv, residual, argmax, spec, g, *grads[0]);
                         });
}

}  // namespace

ag::Var fake_quant(ag::Var w, const QuantSpec& spec, SteMode mode) {
  if (mode == SteMode::kIdentity) return fake_quant(w, spec);
  return record_step_aware(w, fake_quant_values(w.value(), spec), spec, rounding_residual(w.value(), spec),
                           group_argmax(w.value(), spec));
}

ag::Var frozen_fake_quant(ag::Var w, const QuantSpec& spec, const FrozenGrid& grid) {
  const Tensor& wv = w.value();
  const GroupMap map = make_group_map(wv.shape(), spec);
  if (grid.residual.shape() != wv.shape() || grid.argmax.size() != map.num_groups()) {
    throw DimensionError(fmt::format("frozen_fake_quant: grid {} with {} groups for weight {}",
                                     shape_string(grid.residual.shape()), grid.argmax.size(),
                                     shape_string(wv.shape())));
  }
  const float n = float(spec.clip_n());
  std::vector<float> scales(map.num_groups(), kZeroGroupScale);
  for (std::size_t g = 0; g < scales.size(); ++g) {
    if (grid.argmax[g] != kNoArgmax) scales[g] = std::abs(wv[grid.argmax[g]]) / n;
  }
  Tensor out(wv.shape());
  for (std::size_t i = 0; i < wv.numel(); ++i) out[i] = wv[i] + scales[map.group_of(i)] * grid.residual[i];
  return record_step_aware(w, std::move(out), spec, grid.residual, grid.argmax);
}

FrozenGrid freeze_grid(const Tensor& w, const QuantSpec& spec) {
  return FrozenGrid{rounding_residual(w, spec), group_argmax(w, spec)};
}

double quant_mse(const Tensor& w, const QuantSpec& spec) {
  const Tensor fq = fake_quant_values(w, spec);
  double total = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double d = double(w[i]) - double(fq[i]);
    total += d * d;
  }
  return w.numel() == 0 ? 0.0 : total / double(w.numel());
}

}  // namespace teq
