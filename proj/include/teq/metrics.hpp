// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "teq/model.hpp"

namespace teq {

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  std::size_t windows = 0;
};

/// exp(mean NLL) over windows starting every `stride` tokens (0 means
/// stride = seq_len, i.e. non-overlapping). Each window scores seq_len
/// next-token predictions. `batch` only affects speed, never the result.
PerplexityResult perplexity(const ModelGraph& model, std::span<const std::int32_t> corpus, std::size_t seq_len,
                            std::size_t stride = 0, std::size_t batch = 8);

/// Runs both models on the same probes and returns, per linear layer, the
/// mean of (y - y_hat)^2 over that layer's output.
std::map<std::string, double> layer_quant_loss(const ModelGraph& reference, const ModelGraph& quantized,
                                               const TokenBatch& probes);

double total_mse(const std::map<std::string, double>& per_layer);

struct SiteHistogram {
  std::string site;
  std::size_t layer_index = 0;  // ordinal of the site in graph order
  std::vector<std::size_t> counts;  // bins + 1 overflow
  float min = 0.0f;
  float max = 0.0f;
  double mean = 0.0;
  std::size_t near_one = 0;  // elements with |s| in [0.75, 1.25]
  std::size_t count = 0;
};

struct ScaleHistogram {
  double lo = 0.0;
  double hi = 2.0;
  std::size_t bins = 50;
  std::vector<SiteHistogram> sites;

  std::size_t total_count() const;
  /// Fraction of all scales with magnitude in [0.75, 1.25].
  double fraction_near_one() const;
  double bin_lo(std::size_t b) const;
  double bin_hi(std::size_t b) const;
  /// "site,layer,bin_lo,bin_hi,count"; the overflow row has bin_hi = inf.
  std::string to_csv() const;
  /// "site,layer,count,min,max,mean,frac_0.75_1.25"
  std::string stats_csv() const;
};

/// Histogram of |s| per site over `bins` uniform bins on [lo, hi) plus one
/// overflow bin for values >= hi. Sites are ordered as in `sites`.
ScaleHistogram scale_histogram(const ScaleSet& scales, const std::vector<FusionSite>& sites, std::size_t bins = 50,
                               double lo = 0.0, double hi = 2.0);

struct ParamAccounting {
  std::string model;
  std::size_t blocks = 0;
  std::size_t applicable_linears = 0;
  std::size_t total_linears = 0;
  std::size_t param_groups = 0;
  std::uint64_t teq_params = 0;
  std::uint64_t total_params = 0;
  double ratio = 0.0;  // teq_params / total_params
};

/// Structural counts only; weights and seeds do not enter.
ParamAccounting param_accounting(const ModelGraph& model, const std::vector<FusionSite>& sites);

/// Published full-scale reference rows (not computed here).
const std::vector<ParamAccounting>& published_accounting();

/// "model,blocks,teq_applicable_linears,total_linears,teq_param_groups,
///  teq_params,total_params,ratio_percent,source"
std::string accounting_csv(const std::vector<std::pair<ParamAccounting, std::string>>& rows);

struct EvalReport {
  /// Echoed configuration, written first in insertion order.
  std::vector<std::pair<std::string, std::string>> echo;
  PerplexityResult ppl;
  std::map<std::string, double> per_layer_mse;

  /// One "key = value" line each; per-layer rows are "mse.<layer> = v".
  std::string to_text() const;
};

}  // namespace teq
