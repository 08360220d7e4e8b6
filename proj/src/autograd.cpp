// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include <fmt/format.h>

#include "teq/errors.hpp"

namespace teq::ag {

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw ContractError("value() on an unbound Var");
  return tape_->value(*this);
}

void Tape::check_owner(Var v) const {
  if (&v.tape() != this || v.id() >= nodes_.size()) {
    throw ContractError("Var does not belong to this tape");
  }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, {}, requires_grad, std::nullopt});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (const Var& in : inputs) {
    check_owner(in);
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor* Tape::grad(Var v) const {
  check_owner(v);
  const auto& g = nodes_[v.id()].grad;
  return g ? &*g : nullptr;
}

Tensor Tape::grad_or_zeros(Var v) const {
  if (const Tensor* g = grad(v)) return *g;
  return Tensor(value(v).shape());
}

void Tape::backward(Var loss) {
  check_owner(loss);
  Node& root = nodes_[loss.id()];
  if (root.value.numel() != 1) {
    throw ContractError(fmt::format("backward() needs a scalar loss, got shape {}", shape_string(root.value.shape())));
  }
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0f);

  std::vector<Tensor*> slots;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.grad || !node.backward) continue;
    slots.clear();
    for (std::size_t in : node.inputs) {
      Node& src = nodes_[in];
      if (!src.requires_grad) {
        slots.push_back(nullptr);
        continue;
      }
      if (!src.grad) src.grad = Tensor(src.value.shape());
      slots.push_back(&*src.grad);
    }
    node.backward(*node.grad, slots);
  }
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(fmt::format("{}: shapes {} and {} differ", op, shape_string(a.shape()), shape_string(b.shape())));
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

struct ChannelLayout {
  std::size_t outer = 1;
  std::size_t channels = 1;
  std::size_t inner = 1;
};

ChannelLayout channel_layout(const Tensor& x, const Tensor& s, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError(fmt::format("channel axis {} out of range for {}", axis, shape_string(x.shape())));
  }
  if (s.rank() != 1 || s.numel() != x.dim(axis)) {
    throw DimensionError(fmt::format("channel vector {} does not match axis {} of {}", shape_string(s.shape()), axis,
                                     shape_string(x.shape())));
  }
  ChannelLayout layout;
  for (std::size_t i = 0; i < axis; ++i) layout.outer *= x.dim(i);
  layout.channels = x.dim(axis);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) layout.inner *= x.dim(i);
  return layout;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tensor out = teq::matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) add_into(*grads[0], teq::matmul(g, teq::transpose(b.value())));
    if (grads[1]) add_into(*grads[1], teq::matmul(teq::transpose(a.value()), g));
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  add_into(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) add_into(*grads[0], g);
    if (grads[1]) add_into(*grads[1], g);
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> grads) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (grads[0]) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*grads[0])[i] += g[i] * bv[i];
    }
    if (grads[1]) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*grads[1])[i] += g[i] * av[i];
    }
  });
}

Var div(Var a, Var b) {
  require_same_shape("div", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (bv[i] == 0.0f) throw NumericDomainError(fmt::format("div: zero divisor at element {}", i));
    out[i] = av[i] / bv[i];
  }
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> grads) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (grads[0]) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*grads[0])[i] += g[i] / bv[i];
    }
    if (grads[1]) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*grads[1])[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale_channels(Var x, Var s, std::size_t axis) {
  const ChannelLayout l = channel_layout(x.value(), s.value(), axis);
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t idx = (o * l.channels + c) * l.inner + i;
        out[idx] = xv[idx] * sv[c];
      }
  return x.tape().record(std::move(out), {x, s}, [x, s, l](const Tensor& g, std::span<Tensor* const> grads) {
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    std::vector<double> gs(l.channels, 0.0);
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t c = 0; c < l.channels; ++c)
        for (std::size_t i = 0; i < l.inner; ++i) {
          const std::size_t idx = (o * l.channels + c) * l.inner + i;
          if (grads[0]) (*grads[0])[idx] += g[idx] * sv[c];
          gs[c] += double(g[idx]) * double(xv[idx]);
        }
    if (grads[1]) {
      for (std::size_t c = 0; c < l.channels; ++c) (*grads[1])[c] += float(gs[c]);
    }
  });
}

Var unscale_channels(Var x, Var s, std::size_t axis) {
  const ChannelLayout l = channel_layout(x.value(), s.value(), axis);
  const Tensor& xv = x.value();
  const Tensor& sv = s.value();
  for (std::size_t c = 0; c < l.channels; ++c) {
    if (sv[c] == 0.0f) throw NumericDomainError(fmt::format("unscale_channels: zero scale at channel {}", c));
  }
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t c = 0; c < l.channels; ++c)
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t idx = (o * l.channels + c) * l.inner + i;
        out[idx] = xv[idx] / sv[c];
      }
  return x.tape().record(std::move(out), {x, s}, [x, s, l](const Tensor& g, std::span<Tensor* const> grads) {
    const Tensor& xv = x.value();
    const Tensor& sv = s.value();
    std::vector<double> gs(l.channels, 0.0);
    for (std::size_t o = 0; o < l.outer; ++o)
      for (std::size_t c = 0; c < l.channels; ++c)
        for (std::size_t i = 0; i < l.inner; ++i) {
          const std::size_t idx = (o * l.channels + c) * l.inner + i;
          if (grads[0]) (*grads[0])[idx] += g[idx] / sv[c];
          gs[c] += double(g[idx]) * double(xv[idx]);
        }
    if (grads[1]) {
      for (std::size_t c = 0; c < l.channels; ++c) {
        const double sc = sv[c];
        (*grads[1])[c] += float(-gs[c] / (sc * sc));
      }
    }
  });
}

Var add_constant(Var x, const Tensor& offset) {
  require_same_shape("add_constant", x.value(), offset);
  Tensor out = x.value();
  add_into(out, offset);
  return x.tape().record(std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (grads[0]) add_into(*grads[0], g);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  const std::size_t rows = xv.rows();
  if (gamma.value().numel() != d || beta.value().numel() != d) {
    throw DimensionError(fmt::format("layer_norm: gamma {} / beta {} do not match width {}",
                                     shape_string(gamma.value().shape()), shape_string(beta.value().shape()), d));
  }
  if (!(eps >= 0.0f)) throw ContractError("layer_norm: eps must be non-negative");

  auto xhat = std::make_shared<std::vector<float>>(xv.numel());
  auto rstd = std::make_shared<std::vector<float>>(rows);
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= double(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= double(d);
    const double rs = 1.0 / std::sqrt(var + double(eps));
    (*rstd)[r] = float(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = float(xh);
      out[r * d + j] = float(xh * gv[j] + bv[j]);
    }
  }
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [gamma, xhat, rstd, d, rows](const Tensor& g, std::span<Tensor* const> grads) {
                           const Tensor& gv = gamma.value();
                           std::vector<double> dgamma(d, 0.0), dbeta(d, 0.0);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const float* grow = g.data().data() + r * d;
                             const float* xh = xhat->data() + r * d;
                             double mean_gy = 0.0, mean_gyx = 0.0;
                             for (std::size_t j = 0; j < d; ++j) {
                               const double gy = double(grow[j]) * gv[j];
                               mean_gy += gy;
                               mean_gyx += gy * xh[j];
                               dgamma[j] += double(grow[j]) * xh[j];
                               dbeta[j] += grow[j];
                             }
                             mean_gy /= double(d);
                             mean_gyx /= double(d);
                             if (grads[0]) {
                               for (std::size_t j = 0; j < d; ++j) {
                                 const double gy = double(grow[j]) * gv[j];
                                 (*grads[0])[r * d + j] += float((*rstd)[r] * (gy - mean_gy - xh[j] * mean_gyx));
                               }
                             }
                           }
                           for (std::size_t j = 0; j < d; ++j) {
                             if (grads[1]) (*grads[1])[j] += float(dgamma[j]);
                             if (grads[2]) (*grads[2])[j] += float(dbeta[j]);
                           }
                         });
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const double v = xv[i];
    out[i] = float(0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)));
  }
  return x.tape().record(std::move(out), {x}, [x](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    const Tensor& xv = x.value();
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*grads[0])[i] += float(g[i] * (cdf + v * pdf));
    }
  });
}

Var embedding(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError(fmt::format("embedding table must be rank 2, got {}", shape_string(tv.shape())));
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  Tensor out({ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || std::size_t(ids[r]) >= vocab) {
      throw IndexError(fmt::format("embedding: id {} outside [0, {})", ids[r], vocab));
    }
    std::copy_n(tv.data().data() + std::size_t(ids[r]) * d, d, out.data().data() + r * d);
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return table.tape().record(std::move(out), {table},
                             [saved = std::move(saved), d](const Tensor& g, std::span<Tensor* const> grads) {
                               if (!grads[0]) return;
                               for (std::size_t r = 0; r < saved.size(); ++r) {
                                 float* dst = grads[0]->data().data() + std::size_t(saved[r]) * d;
                                 const float* src = g.data().data() + r * d;
                                 for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                               }
                             });
}

Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t n_heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_same_shape("attention", qv, kv);
  require_same_shape("attention", qv, vv);
  const std::size_t d = qv.cols();
  if (qv.rank() != 2 || qv.rows() != batch * seq || n_heads == 0 || d % n_heads != 0) {
    throw DimensionError(fmt::format("attention: {} is not [{}x{} x d] with d divisible by {} heads",
                                     shape_string(qv.shape()), batch, seq, n_heads));
  }
  const std::size_t hd = d / n_heads;
  const float scale = float(1.0 / std::sqrt(double(hd)));

  // probs[((b*H + h)*T + i)*T + j], zero where j > i.
  auto probs = std::make_shared<std::vector<float>>(batch * n_heads * seq * seq, 0.0f);
  Tensor out(qv.shape());
  std::vector<double> scores(seq);
  std::vector<double> acc(hd);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        const float* qi = qv.data().data() + (b * seq + i) * d + h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const float* kj = kv.data().data() + (b * seq + j) * d + h * hd;
          double dot = 0.0;
          for (std::size_t t = 0; t < hd; ++t) dot += double(qi[t]) * double(kj[t]);
          scores[j] = dot * double(scale);
          mx = std::max(mx, scores[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        float* p = probs->data() + ((b * n_heads + h) * seq + i) * seq;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const double pj = scores[j] / denom;
          p[j] = float(pj);
          const float* vj = vv.data().data() + (b * seq + j) * d + h * hd;
          for (std::size_t t = 0; t < hd; ++t) acc[t] += pj * double(vj[t]);
        }
        float* oi = out.data().data() + (b * seq + i) * d + h * hd;
        for (std::size_t t = 0; t < hd; ++t) oi[t] = float(acc[t]);
      }
    }
  }
  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, probs, batch, seq, n_heads, d, hd, scale](const Tensor& g, std::span<Tensor* const> grads) {
        const Tensor& qv = q.value();
        const Tensor& kv = k.value();
        const Tensor& vv = v.value();
        std::vector<float> dp(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
              const float* p = probs->data() + ((b * n_heads + h) * seq + i) * seq;
              const float* gi = g.data().data() + (b * seq + i) * d + h * hd;
              double pdp = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t row_j = (b * seq + j) * d + h * hd;
                float dot = 0.0f;
                for (std::size_t t = 0; t < hd; ++t) dot += gi[t] * vv[row_j + t];
                dp[j] = dot;
                pdp += double(p[j]) * dot;
                if (grads[2]) {
                  for (std::size_t t = 0; t < hd; ++t) (*grads[2])[row_j + t] += p[j] * gi[t];
                }
              }
              const std::size_t row_i = (b * seq + i) * d + h * hd;
              for (std::size_t j = 0; j <= i; ++j) {
                const float ds = float(p[j] * (dp[j] - pdp)) * scale;
                const std::size_t row_j = (b * seq + j) * d + h * hd;
                if (grads[0]) {
                  for (std::size_t t = 0; t < hd; ++t) (*grads[0])[row_i + t] += ds * kv[row_j + t];
                }
                if (grads[1]) {
                  for (std::size_t t = 0; t < hd; ++t) (*grads[1])[row_j + t] += ds * qv[row_i + t];
                }
              }
            }
          }
        }
      });
}

std::vector<double> cross_entropy_rows(const Tensor& logits, std::span<const std::int32_t> targets) {
  const std::size_t rows = logits.rows();
  const std::size_t vocab = logits.cols();
  if (targets.size() != rows) {
    throw DimensionError(fmt::format("cross entropy: {} targets for {} rows", targets.size(), rows));
  }
  std::vector<double> nll(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] < 0 || std::size_t(targets[r]) >= vocab) {
      throw IndexError(fmt::format("cross entropy: target {} outside [0, {})", targets[r], vocab));
    }
    const float* row = logits.data().data() + r * vocab;
    const float mx = *std::max_element(row, row + vocab);
    double denom = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(double(row[j]) - double(mx));
    nll[r] = double(mx) + std::log(denom) - double(row[targets[r]]);
  }
  return nll;
}

Var softmax_cross_entropy(Var logits, std::span<const std::int32_t> targets) {
  const std::vector<double> nll = cross_entropy_rows(logits.value(), targets);
  double total = 0.0;
  for (double v : nll) total += v;
  const std::size_t rows = nll.size();
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return logits.tape().record(
      Tensor::scalar(float(total / double(rows))), {logits},
      [logits, saved = std::move(saved), rows](const Tensor& g, std::span<Tensor* const> grads) {
        if (!grads[0]) return;
        const Tensor& lv = logits.value();
        const std::size_t vocab = lv.cols();
        const double coef = double(g[0]) / double(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const float* row = lv.data().data() + r * vocab;
          const float mx = *std::max_element(row, row + vocab);
          double denom = 0.0;
          for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(double(row[j]) - double(mx));
          float* dst = grads[0]->data().data() + r * vocab;
          for (std::size_t j = 0; j < vocab; ++j) {
            double p = std::exp(double(row[j]) - double(mx)) / denom;
            if (std::size_t(saved[r]) == j) p -= 1.0;
            dst[j] += float(coef * p);
          }
        }
      });
}

Var sum(Var x) {
  double total = 0.0;
  for (float v : x.value().data()) total += v;
  return x.tape().record(Tensor::scalar(float(total)), {x}, [](const Tensor& g, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (float& v : grads[0]->data()) v += g[0];
  });
}

GradCheckResult finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, float h) {
  if (!(h > 0.0f)) throw ContractError("finite_diff_check: h must be positive");
  GradCheckResult result;
  {
    Tape tape;
    Var in = tape.leaf(x, true);
    Var out = f(tape, in);
    if (out.value().numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    tape.backward(out);
    result.analytic = tape.grad_or_zeros(in);
  }
  auto eval = [&f](const Tensor& point) {
    Tape tape;
    Var in = tape.leaf(point, false);
    return double(f(tape, in).value().item());
  };
  result.numeric = Tensor(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const float plus = x[i] + h;
    const float minus = x[i] - h;
    probe[i] = plus;
    const double fp = eval(probe);
    probe[i] = minus;
    const double fm = eval(probe);
    probe[i] = x[i];
    // The realized step, not h: x +- h is rounded to float.
    result.numeric[i] = float((fp - fm) / (double(plus) - double(minus)));
  }
  double scale = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    scale = std::max({scale, std::abs(double(result.analytic[i])), std::abs(double(result.numeric[i]))});
    worst = std::max(worst, std::abs(double(result.analytic[i]) - double(result.numeric[i])));
  }
  result.max_rel_error = worst / scale;
  return result;
}

}  // namespace teq::ag
