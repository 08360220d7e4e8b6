// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>

#include "teq/model.hpp"
#include "teq/trainer.hpp"

namespace teq {

/// Full-weight language-model training used to produce the float model that
/// scale training later starts from.
struct PretrainConfig {
  ModelConfig model{};
  std::int64_t steps = 1500;
  std::size_t batch_size = 4;
  std::size_t seq_len = 128;
  float lr = 3e-3f;
  std::int64_t warmup_steps = 50;
  float beta1 = 0.9f;
  float beta2 = 0.95f;
  float weight_decay = 0.0f;
  std::uint64_t seed = 0;

  void validate() const;
};

struct PretrainResult {
  ModelGraph model;
  LossTrace trace;
};

/// Windows start at seeded random offsets; lr warms up linearly, then
/// decays linearly to 10% of its peak. Deterministic for a given seed.
PretrainResult pretrain(std::span<const std::int32_t> corpus, const PretrainConfig& cfg);

}  // namespace teq
