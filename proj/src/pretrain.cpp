// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <fmt/format.h>

#include "teq/errors.hpp"
#include "teq/random.hpp"

namespace teq {

void PretrainConfig::validate() const {
  model.validate();
  if (steps < 1) throw ContractError(fmt::format("steps must be >= 1, got {}", steps));
  if (batch_size < 1 || seq_len < 1) throw ContractError("batch_size and seq_len must be positive");
  if (seq_len > model.max_seq_len) {
    throw ContractError(fmt::format("seq_len {} exceeds max_seq_len {}", seq_len, model.max_seq_len));
  }
  if (!(lr > 0.0f)) throw ContractError("lr must be positive");
  if (warmup_steps < 0) throw ContractError("warmup_steps must be non-negative");
}

namespace {

float schedule(const PretrainConfig& cfg, std::int64_t step) {
  if (step < cfg.warmup_steps) return cfg.lr * float(step + 1) / float(cfg.warmup_steps);
  const double span = double(std::max<std::int64_t>(cfg.steps - cfg.warmup_steps, 1));
  const double frac = double(step - cfg.warmup_steps) / span;
  return float(double(cfg.lr) * (1.0 - 0.9 * frac));
}

}  // namespace

PretrainResult pretrain(std::span<const std::int32_t> corpus, const PretrainConfig& cfg) {
  cfg.validate();
  if (corpus.size() < cfg.seq_len + 1) {
    throw DataError(fmt::format("corpus of {} tokens is shorter than one window of {}", corpus.size(), cfg.seq_len + 1));
  }
  for (std::int32_t t : corpus) {
    if (t < 0 || std::size_t(t) >= cfg.model.vocab_size) {
      throw DataError(fmt::format("corpus token {} outside vocabulary of {}", t, cfg.model.vocab_size));
    }
  }
  PretrainResult result{build_model(cfg.model, cfg.seed), {}};
  Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  const std::size_t max_start = corpus.size() - cfg.seq_len - 1;
  const AdamParams hp{cfg.beta1, cfg.beta2, 1e-8f, cfg.weight_decay};
  std::map<std::string, AdamState> states;

  for (std::int64_t step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> offsets(cfg.batch_size);
    for (std::size_t& o : offsets) o = rng.below(max_start + 1);
    const WindowBatch batch = make_offset_batch(corpus, offsets, cfg.seq_len);

    ag::Tape tape;
    ForwardOptions opts;
    opts.params_require_grad = true;
    ForwardResult fr = forward(tape, result.model, batch.inputs, opts);
    ag::Var loss = ag::softmax_cross_entropy(fr.logits, batch.targets);
    const float value = loss.value().item();
    if (!std::isfinite(value)) {
      throw TrainingDivergenceError(std::size_t(step), fmt::format("pretraining loss became {} at step {}", value, step));
    }
    tape.backward(loss);
    const float lr = schedule(cfg, step);
    for (const auto& [name, var] : fr.params) {
      const Tensor grad = tape.grad_or_zeros(var);
      adam_step(result.model.param(name).data(), grad.data(), states[name], hp, lr);
    }
    result.trace.records.push_back(TraceRecord{step, lr, double(value)});
  }
  return result;
}

}  // namespace teq
