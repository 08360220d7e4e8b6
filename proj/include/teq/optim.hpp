// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace teq {

struct AdamParams {
  float beta1 = 0.9f;
  float beta2 = 0.9f;
  float eps = 1e-8f;
  /// L2 penalty added to the gradient (torch.optim.Adam semantics).
  float weight_decay = 0.0f;
};

/// Moments for one parameter tensor. `step` counts completed updates.
struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update in place. When `clamp_min` is set every
/// parameter is raised to at least that value afterwards.
void adam_step(std::span<float> params, std::span<const float> grads, AdamState& state, const AdamParams& hp,
               float lr, std::optional<float> clamp_min = std::nullopt);

/// lr * (1 - completed / total), never negative.
float linear_decay_lr(float base_lr, std::int64_t completed_steps, std::int64_t total_steps);

}  // namespace teq
