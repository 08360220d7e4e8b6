// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "teq/corpus.hpp"
#include "teq/errors.hpp"

namespace teq {

PerplexityResult perplexity(const ModelGraph& model, std::span<const std::int32_t> corpus, std::size_t seq_len,
                            std::size_t stride, std::size_t batch) {
  if (seq_len == 0 || batch == 0) throw ContractError("perplexity: seq_len and batch must be positive");
  if (stride == 0) stride = seq_len;
  if (corpus.size() < seq_len + 1) {
    throw DataError(fmt::format("perplexity: corpus of {} tokens is shorter than seq_len + 1 = {}", corpus.size(),
                                seq_len + 1));
  }
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + seq_len + 1 <= corpus.size(); s += stride) starts.push_back(s);

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t first = 0; first < starts.size(); first += batch) {
    const std::size_t last = std::min(starts.size(), first + batch);
    const std::span<const std::size_t> group(starts.data() + first, last - first);
    const WindowBatch wb = make_offset_batch(corpus, group, seq_len);
    for (double nll : ag::cross_entropy_rows(compute_logits(model, wb.inputs), wb.targets)) {
      total += nll;
      ++count;
    }
  }
  PerplexityResult r;
  r.tokens = count;
  r.windows = starts.size();
  r.mean_nll = total / double(count);
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

std::map<std::string, double> layer_quant_loss(const ModelGraph& reference, const ModelGraph& quantized,
                                               const TokenBatch& probes) {
  if (reference.layers.size() != quantized.layers.size()) {
    throw DimensionError("layer_quant_loss: models have different layer counts");
  }
  ForwardOptions opts;
  opts.capture_linear_outputs = true;
  ag::Tape tape_ref;
  ag::Tape tape_q;
  const ForwardResult ref = forward(tape_ref, reference, probes, opts);
  const ForwardResult q = forward(tape_q, quantized, probes, opts);
  std::map<std::string, double> out;
  for (const auto& [name, var] : ref.linear_outputs) {
    const Tensor& y = var.value();
    const Tensor& y_hat = q.linear_outputs.at(name).value();
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const double d = double(y[i]) - double(y_hat[i]);
      acc += d * d;
    }
    out[name] = acc / double(y.numel());
  }
  return out;
}

double total_mse(const std::map<std::string, double>& per_layer) {
  double t = 0.0;
  for (const auto& [_, v] : per_layer) t += v;
  return t;
}

std::size_t ScaleHistogram::total_count() const {
  std::size_t n = 0;
  for (const SiteHistogram& s : sites) n += s.count;
  return n;
}

double ScaleHistogram::fraction_near_one() const {
  std::size_t near = 0;
  for (const SiteHistogram& s : sites) near += s.near_one;
  const std::size_t n = total_count();
  return n == 0 ? 0.0 : double(near) / double(n);
}

double ScaleHistogram::bin_lo(std::size_t b) const { return b >= bins ? hi : lo + (hi - lo) * double(b) / double(bins); }

double ScaleHistogram::bin_hi(std::size_t b) const {
  return b >= bins ? std::numeric_limits<double>::infinity() : lo + (hi - lo) * double(b + 1) / double(bins);
}

std::string ScaleHistogram::to_csv() const {
  std::string out = "site,layer,bin_lo,bin_hi,count\n";
  for (const SiteHistogram& s : sites) {
    for (std::size_t b = 0; b <= bins; ++b) {
      out += fmt::format("{},{},{:.6g},{:.6g},{}\n", s.site, s.layer_index, bin_lo(b), bin_hi(b), s.counts[b]);
    }
  }
  return out;
}

std::string ScaleHistogram::stats_csv() const {
  std::string out = "site,layer,count,min,max,mean,frac_0.75_1.25\n";
  for (const SiteHistogram& s : sites) {
    out += fmt::format("{},{},{},{:.9g},{:.9g},{:.9g},{:.6f}\n", s.site, s.layer_index, s.count, s.min, s.max, s.mean,
                       s.count == 0 ? 0.0 : double(s.near_one) / double(s.count));
  }
  return out;
}

ScaleHistogram scale_histogram(const ScaleSet& scales, const std::vector<FusionSite>& sites, std::size_t bins,
                               double lo, double hi) {
  if (bins == 0 || !(hi > lo)) throw ContractError("scale_histogram: need bins > 0 and hi > lo");
  ScaleHistogram h;
  h.lo = lo;
  h.hi = hi;
  h.bins = bins;
  std::size_t ordinal = 0;
  for (const FusionSite& site : sites) {
    const auto it = scales.by_site.find(site.id);
    if (it == scales.by_site.end()) continue;
    const Tensor& s = it->second;
    SiteHistogram sh;
    sh.site = site.id;
    sh.layer_index = ordinal++;
    sh.counts.assign(bins + 1, 0);
    sh.count = s.numel();
    sh.min = std::numeric_limits<float>::infinity();
    sh.max = -std::numeric_limits<float>::infinity();
    double total = 0.0;
    for (float raw : s.data()) {
      const double v = std::abs(double(raw));
      std::size_t b = bins;
      if (v < hi) b = std::min(bins - 1, std::size_t(std::max(0.0, std::floor((v - lo) / (hi - lo) * double(bins)))));
      ++sh.counts[b];
      sh.min = std::min(sh.min, float(v));
      sh.max = std::max(sh.max, float(v));
      total += v;
      if (v >= 0.75 && v <= 1.25) ++sh.near_one;
    }
    sh.mean = sh.count == 0 ? 0.0 : total / double(sh.count);
    h.sites.push_back(std::move(sh));
  }
  return h;
}

ParamAccounting param_accounting(const ModelGraph& model, const std::vector<FusionSite>& sites) {
  ParamAccounting a;
  a.model = "desk";
  a.blocks = model.config.n_layers;
  for (const Layer& layer : model.layers) {
    if (layer.kind == LayerKind::kLinear || layer.kind == LayerKind::kLmHead) ++a.total_linears;
  }
  for (const FusionSite& site : sites) {
    a.applicable_linears += site.consumers.size();
    a.teq_params += site.channel_count;
  }
  a.param_groups = sites.size();
  a.total_params = model.param_count();
  a.ratio = a.total_params == 0 ? 0.0 : double(a.teq_params) / double(a.total_params);
  return a;
}

const std::vector<ParamAccounting>& published_accounting() {
  static const std::vector<ParamAccounting> rows = {
      {"BLOOM-3B", 30, 60, 121, 60, 153600, 3644810240ULL, 0.0000421},
      {"BLOOM-7B1", 30, 60, 121, 60, 245760, 8096620544ULL, 0.0000304},
      {"OPT-6.7B", 32, 160, 193, 72, 786432, 6864388096ULL, 0.0001146},
      {"OPT-13B", 40, 200, 241, 96, 1228800, 13110865920ULL, 0.0000937},
      {"LLaMA-7B", 32, 160, 225, 64, 262144, 6738415616ULL, 0.0000389},
      {"LLaMA-13B", 40, 200, 281, 80, 409600, 13015864320ULL, 0.0000315},
  };
  return rows;
}

std::string accounting_csv(const std::vector<std::pair<ParamAccounting, std::string>>& rows) {
  std::string out =
      "model,blocks,teq_applicable_linears,total_linears,teq_param_groups,teq_params,total_params,ratio_percent,"
      "source\n";
  for (const auto& [a, source] : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{:.5f},{}\n", a.model, a.blocks, a.applicable_linears, a.total_linears,
                       a.param_groups, a.teq_params, a.total_params, a.ratio * 100.0, source);
  }
  return out;
}

std::string EvalReport::to_text() const {
  std::string out;
  for (const auto& [k, v] : echo) out += fmt::format("{} = {}\n", k, v);
  out += fmt::format("tokens = {}\n", ppl.tokens);
  out += fmt::format("windows = {}\n", ppl.windows);
  out += fmt::format("mean_nll = {:.17g}\n", ppl.mean_nll);
  out += fmt::format("perplexity = {:.17g}\n", ppl.perplexity);
  if (!per_layer_mse.empty()) {
    out += fmt::format("mse_total = {:.17g}\n", total_mse(per_layer_mse));
    for (const auto& [layer, v] : per_layer_mse) out += fmt::format("mse.{} = {:.17g}\n", layer, v);
  }
  return out;
}

}  // namespace teq
