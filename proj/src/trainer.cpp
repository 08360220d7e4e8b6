// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "teq/errors.hpp"
#include "teq/random.hpp"

namespace teq {

std::string_view init_strategy_name(InitStrategy strategy) {
  switch (strategy) {
    case InitStrategy::kOnes: return "ones";
    case InitStrategy::kInvSqrtCin: return "inv_sqrt_cin";
    case InitStrategy::kAuto: return "auto";
  }
  return "unknown";
}

InitStrategy parse_init_strategy(std::string_view text) {
  if (text == "ones") return InitStrategy::kOnes;
  if (text == "inv-sqrt" || text == "inv_sqrt_cin" || text == "inv-sqrt-cin") return InitStrategy::kInvSqrtCin;
  if (text == "auto") return InitStrategy::kAuto;
  throw UsageError(fmt::format("unknown init strategy '{}' (expected ones, inv-sqrt or auto)", text));
}

std::string_view ste_mode_name(SteMode mode) {
  return mode == SteMode::kIdentity ? "identity" : "step-aware";
}

SteMode parse_ste_mode(std::string_view text) {
  if (text == "step-aware" || text == "step_aware") return SteMode::kStepAware;
  if (text == "identity") return SteMode::kIdentity;
  throw UsageError(fmt::format("unknown STE mode '{}' (expected step-aware or identity)", text));
}

void TrainConfig::validate() const {
  if (steps < 1) throw ContractError(fmt::format("steps must be >= 1, got {}", steps));
  if (!(lr > 0.0f)) throw ContractError(fmt::format("lr must be positive, got {}", lr));
  if (batch_size < 1) throw ContractError("batch_size must be >= 1");
  if (seq_len < 1) throw ContractError("seq_len must be >= 1");
  if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) {
    throw ContractError("Adam betas must lie in [0, 1)");
  }
  if (!(min_scale > 0.0f)) throw ContractError("min_scale must be positive");
  quant.validate();
}

std::string LossTrace::to_csv() const {
  std::string out = "step,lr,loss\n";
  for (const TraceRecord& r : records) out += fmt::format("{},{:.9g},{:.17g}\n", r.step, r.lr, r.loss);
  return out;
}

double LossTrace::tail_mean(std::size_t n) const {
  n = std::min(n, records.size());
  if (n == 0) return std::nan("");
  double total = 0.0;
  for (std::size_t i = records.size() - n; i < records.size(); ++i) total += records[i].loss;
  return total / double(n);
}

double LossTrace::head_mean(std::size_t n) const {
  n = std::min(n, records.size());
  if (n == 0) return std::nan("");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += records[i].loss;
  return total / double(n);
}

ScaleSet init_scales(const std::vector<FusionSite>& sites, InitStrategy strategy) {
  ScaleSet scales;
  for (const FusionSite& site : sites) {
    float value = 1.0f;
    if (strategy == InitStrategy::kInvSqrtCin) {
      value = float(1.0 / std::sqrt(double(site.channel_count)));
    } else if (strategy != InitStrategy::kOnes) {
      throw ContractError("init_scales needs a concrete strategy (ones or inv_sqrt_cin)");
    }
    scales.by_site.emplace(site.id, Tensor({site.channel_count}, value));
  }
  return scales;
}

TeqForward transformed_fake_quant_forward(ag::Tape& tape, const ModelGraph& model,
                                          const std::vector<FusionSite>& sites, const ScaleSet& scales,
                                          const WindowBatch& batch, const std::optional<QuantSpec>& quant,
                                          bool scales_require_grad, FrozenRounding* frozen, std::int64_t step,
                                          SteMode ste) {
  ForwardOptions opts;
  opts.quant = quant;
  opts.ste = ste;
  opts.sites = &sites;
  opts.scales = &scales;
  opts.scales_require_grad = scales_require_grad;
  opts.frozen_rounding = frozen;
  ForwardResult fr = forward(tape, model, batch.inputs, opts);
  ag::Var loss = ag::softmax_cross_entropy(fr.logits, batch.targets);
  if (!std::isfinite(loss.value().item())) {
    throw TrainingDivergenceError(std::size_t(step), fmt::format("loss became {} at step {}", loss.value().item(), step));
  }
  return TeqForward{loss, fr.logits, std::move(fr.scales)};
}

double fake_quant_loss(const ModelGraph& model, const WindowBatch& batch, const std::optional<QuantSpec>& quant) {
  ag::Tape tape;
  ForwardOptions opts;
  opts.quant = quant;
  ForwardResult fr = forward(tape, model, batch.inputs, opts);
  return ag::softmax_cross_entropy(fr.logits, batch.targets).value().item();
}

namespace {

TrainResult train_single(const ModelGraph& model, std::span<const std::int32_t> calibration, const TrainConfig& cfg,
                         InitStrategy strategy) {
  const std::vector<FusionSite> sites = find_fusion_sites(model);
  const std::size_t needed = std::size_t(cfg.steps) * cfg.batch_size;
  const std::size_t available = window_count(calibration.size(), cfg.seq_len);
  if (available < needed) {
    throw DataError(fmt::format("calibration stream has {} windows of {} tokens; {} steps x batch {} need {}",
                                available, cfg.seq_len, cfg.steps, cfg.batch_size, needed));
  }
  std::vector<std::size_t> order(available);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(cfg.seed);
  rng.shuffle(std::span<std::size_t>(order));

  TrainResult result{init_scales(sites, strategy), {}, strategy};
  std::map<std::string, AdamState> states;
  const AdamParams hp{cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay};
  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    const auto first = order.begin() + std::ptrdiff_t(std::size_t(step) * cfg.batch_size);
    const std::vector<std::size_t> windows(first, first + std::ptrdiff_t(cfg.batch_size));
    const WindowBatch batch = make_window_batch(calibration, windows, cfg.seq_len);

    ag::Tape tape;
    TeqForward fwd = transformed_fake_quant_forward(tape, model, sites, result.scales, batch, cfg.quant, true,
                                                    nullptr, step, cfg.ste);
    tape.backward(fwd.loss);
    const float lr = linear_decay_lr(cfg.lr, step, cfg.steps);
    for (auto& [site, s] : result.scales.by_site) {
      const Tensor grad = tape.grad_or_zeros(fwd.scales.at(site));
      adam_step(s.data(), grad.data(), states[site], hp, lr, cfg.min_scale);
    }
    result.trace.records.push_back(TraceRecord{step, lr, double(fwd.loss.value().item())});
  }
  return result;
}

}  // namespace

TrainResult train(const ModelGraph& model, std::span<const std::int32_t> calibration, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.init == InitStrategy::kAuto) return select_init(model, calibration, cfg);
  return train_single(model, calibration, cfg, cfg.init);
}

bool prefer_inv_sqrt(const LossTrace& ones, const LossTrace& inv_sqrt, std::size_t tail_window) {
  return inv_sqrt.tail_mean(tail_window) < ones.tail_mean(tail_window);
}

TrainResult select_init(const ModelGraph& model, std::span<const std::int32_t> calibration, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult ones = train_single(model, calibration, cfg, InitStrategy::kOnes);
  TrainResult inv = train_single(model, calibration, cfg, InitStrategy::kInvSqrtCin);
  return prefer_inv_sqrt(ones.trace, inv.trace, cfg.tail_window) ? std::move(inv) : std::move(ones);
}

}  // namespace teq
