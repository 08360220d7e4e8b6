// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "teq/corpus.hpp"
#include "teq/model.hpp"
#include "teq/optim.hpp"
#include "teq/quant.hpp"

namespace teq {

enum class InitStrategy { kOnes, kInvSqrtCin, kAuto };

std::string_view init_strategy_name(InitStrategy strategy);
/// Accepts "ones", "inv-sqrt" / "inv_sqrt_cin" and "auto".
InitStrategy parse_init_strategy(std::string_view text);

std::string_view ste_mode_name(SteMode mode);
/// Accepts "step-aware" / "step_aware" and "identity".
SteMode parse_ste_mode(std::string_view text);

/// Scale-training recipe. Defaults: Adam with betas (0.9, 0.9), weight
/// decay 0, lr 1e-3 decayed linearly to 0, 1000 steps of batch size 1.
struct TrainConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.9f;
  float weight_decay = 0.0f;
  float adam_eps = 1e-8f;
  std::int64_t steps = 1000;
  std::size_t batch_size = 1;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  InitStrategy init = InitStrategy::kOnes;
  QuantSpec quant{};
  SteMode ste = SteMode::kStepAware;
  /// Scales are clamped to at least this value after every update.
  float min_scale = 1e-5f;
  /// Window of trailing losses compared by select_init.
  std::size_t tail_window = 50;

  /// Throws ContractError (steps < 1, lr <= 0, bad quant spec, ...).
  void validate() const;
};

struct TraceRecord {
  std::int64_t step = 0;
  float lr = 0.0f;
  double loss = 0.0;
  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct LossTrace {
  std::vector<TraceRecord> records;

  /// "step,lr,loss" header then one line per step.
  std::string to_csv() const;
  /// Mean of the last min(n, size) losses.
  double tail_mean(std::size_t n) const;
  double head_mean(std::size_t n) const;
  friend bool operator==(const LossTrace&, const LossTrace&) = default;
};

/// ones -> 1.0; inv_sqrt_cin -> 1/sqrt(channel_count) for each site.
ScaleSet init_scales(const std::vector<FusionSite>& sites, InitStrategy strategy);

struct TeqForward {
  ag::Var loss;
  ag::Var logits;
  std::map<std::string, ag::Var> scales;
};

/// Next-token cross entropy of the transformed, fake-quantized model:
/// site consumers see fake_quant(w · diag(s)), site inputs are divided by s,
/// every other linear except the head is plain-RTN fake-quantized. With
/// `quant` unset nothing is quantized. `ste` picks the backward rule of the
/// fake quantizers. Throws TrainingDivergenceError (carrying `step`) if the
/// loss is not finite.
TeqForward transformed_fake_quant_forward(ag::Tape& tape, const ModelGraph& model,
                                          const std::vector<FusionSite>& sites, const ScaleSet& scales,
                                          const WindowBatch& batch, const std::optional<QuantSpec>& quant,
                                          bool scales_require_grad = true, FrozenRounding* frozen = nullptr,
                                          std::int64_t step = 0, SteMode ste = SteMode::kStepAware);

/// Loss of the plain (untransformed) model, fake-quantized when `quant` is set.
double fake_quant_loss(const ModelGraph& model, const WindowBatch& batch, const std::optional<QuantSpec>& quant);

struct TrainResult {
  ScaleSet scales;
  LossTrace trace;
  InitStrategy strategy = InitStrategy::kOnes;
};

/// Trains the site scales for cfg.steps Adam updates on calibration windows
/// drawn without replacement in a seeded shuffle order. Model weights are
/// read-only. kAuto delegates to select_init. Throws DataError when the
/// calibration stream has fewer than steps * batch_size windows.
TrainResult train(const ModelGraph& model, std::span<const std::int32_t> calibration, const TrainConfig& cfg);

/// True when the inv_sqrt_cin run beats ones on the trailing-loss mean;
/// exact ties go to ones.
bool prefer_inv_sqrt(const LossTrace& ones, const LossTrace& inv_sqrt, std::size_t tail_window);

/// Runs train() for ones and inv_sqrt_cin with identical seed and data
/// order and keeps the one with the lower trailing loss.
TrainResult select_init(const ModelGraph& model, std::span<const std::int32_t> calibration, const TrainConfig& cfg);

}  // namespace teq
