// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "teq/tensor.hpp"

namespace teq::ag {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while
/// its tape is alive.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the gradient of the node's output and one slot per input.
/// A slot is null when that input does not need a gradient; otherwise the
/// callee must add (never assign) its contribution.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> input_grads)>;

/// Append-only define-by-run tape. Nodes are stored in creation order, which
/// is a topological order, and backward() walks them in exact reverse.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every node
  /// that requires one. `loss` must hold exactly one element.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id()).requires_grad; }
  /// Null until backward() reaches the node.
  const Tensor* grad(Var v) const;
  Tensor grad_or_zeros(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::optional<Tensor> grad;
  };

  void check_owner(Var v) const;

  std::deque<Node> nodes_;
};

// Differentiable operations. All inputs must live on the same tape.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var mul(Var a, Var b);
/// Throws NumericDomainError if any divisor element is zero.
Var div(Var a, Var b);
/// x * s broadcast along `axis`, where s has length x.dim(axis).
Var scale_channels(Var x, Var s, std::size_t axis);
/// x / s broadcast along `axis`.
Var unscale_channels(Var x, Var s, std::size_t axis);
/// x + offset, where offset is a constant (no gradient).
Var add_constant(Var x, const Tensor& offset);
/// Normalizes over the last axis: (x - mean) / sqrt(var + eps) * gamma + beta.
Var layer_norm(Var x, Var gamma, Var beta, float eps);
/// Exact (erf) GELU.
Var gelu(Var x);
/// Gathers rows of a [V×d] table. Out-of-range ids throw IndexError.
Var embedding(Var table, std::span<const std::int32_t> ids);
/// Multi-head causal self-attention over q/k/v of shape [batch*seq × d].
/// Position i attends to positions 0..i of the same sequence only.
Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t n_heads);
/// Mean over rows of -log softmax(logits)[target]; reduced in double.
Var softmax_cross_entropy(Var logits, std::span<const std::int32_t> targets);
/// Sum of all elements, accumulated in double.
Var sum(Var x);

/// Per-row negative log-likelihood, computed exactly as the forward of
/// softmax_cross_entropy but without a tape.
std::vector<double> cross_entropy_rows(const Tensor& logits, std::span<const std::int32_t> targets);

struct GradCheckResult {
  double max_rel_error = 0.0;
  Tensor analytic;
  Tensor numeric;
};

/// Compares the autodiff gradient of scalar f at x against central
/// differences (f(x+h e_i) - f(x-h e_i)) / 2h. The error is normwise:
/// max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf, 1e-6).
GradCheckResult finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, float h);

}  // namespace teq::ag
