// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/optim.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "teq/errors.hpp"

namespace teq {

void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state, const AdamParams& hp,
               float lr, std::optional<float> clamp_min) {
  if (params.size() != grads.size()) {
    throw DimensionError(fmt::format("adam_step: {} params but {} grads", params.size(), grads.size()));
  }
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0f);
    state.v.assign(params.size(), 0.0f);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam_step: optimizer state does not match parameter size");
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(double(hp.beta1), double(state.step));
  const double bc2 = 1.0 - std::pow(double(hp.beta2), double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = grads[i] + hp.weight_decay * params[i];
    state.m[i] = hp.beta1 * state.m[i] + (1.0f - hp.beta1) * g;
    state.v[i] = hp.beta2 * state.v[i] + (1.0f - hp.beta2) * g * g;
    const double m_hat = double(state.m[i]) / bc1;
    const double v_hat = double(state.v[i]) / bc2;
    params[i] = float(double(params[i]) - double(lr) * m_hat / (std::sqrt(v_hat) + double(hp.eps)));
    if (clamp_min) params[i] = std::max(params[i], *clamp_min);
  }
}

float linear_decay_lr(float base_lr, std::int64_t completed_steps, std::int64_t total_steps) {
  if (total_steps <= 0) throw ContractError("linear_decay_lr: total_steps must be positive");
  const double frac = 1.0 - double(completed_steps) / double(total_steps);
  return float(double(base_lr) * std::max(0.0, frac));
}

}  // namespace teq
