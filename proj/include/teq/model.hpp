// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "teq/autograd.hpp"
#include "teq/quant.hpp"
#include "teq/tensor.hpp"

namespace teq {

/// Byte-level vocabulary: 256 raw bytes plus three specials.
inline constexpr std::int32_t kBosToken = 256;
inline constexpr std::int32_t kEosToken = 257;
inline constexpr std::int32_t kPadToken = 258;
inline constexpr std::size_t kByteVocabSize = 259;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_layers = 2;
  std::size_t vocab_size = kByteVocabSize;
  std::size_t max_seq_len = 128;
  std::size_t mlp_ratio = 4;
  float ln_eps = 1e-5f;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LayerKind { kEmbedding, kLayerNorm, kLinear, kAttention, kActivation, kResidualAdd, kLmHead };

const char* layer_kind_name(LayerKind kind);

/// Index used in Layer::inputs for the token ids fed to the graph.
inline constexpr int kTokenInput = -1;

/// One node of the model graph. `inputs` refer to earlier layers, so the
/// layer list is topologically ordered by construction.
///
/// Parameters by kind:
///   embedding:  token [V×d], position [S×d]
///   layer_norm: gamma [d], beta [d]
///   linear / lm_head: weight [c_in×c_out]; output = input · weight
struct Layer {
  std::string name;
  LayerKind kind;
  std::vector<int> inputs;
  std::map<std::string, Tensor> params;
};

struct ModelGraph {
  ModelConfig config;
  std::vector<Layer> layers;

  /// "<layer>.<param>" in layer order, params sorted by name.
  std::vector<std::string> param_names() const;
  const Tensor& param(const std::string& full_name) const;
  Tensor& param(const std::string& full_name);
  std::size_t param_count() const;
  std::size_t layer_index(const std::string& name) const;
  /// Throws ContractError on a malformed graph (bad refs, bad shapes).
  void validate() const;
};

/// Pre-LN decoder-only transformer with learned positions and a GELU MLP.
/// Weights ~ N(0, 0.02), residual output projections scaled by
/// 1/sqrt(2*n_layers), LayerNorm gamma=1 and beta=0. Same seed, same bits.
ModelGraph build_model(const ModelConfig& config, std::uint64_t seed);

/// Closed-form parameter count of build_model(config).
std::size_t expected_param_count(const ModelConfig& config);

/// A LayerNorm whose output feeds only linear layers; those linears can
/// absorb a per-input-channel scale while the LayerNorm absorbs its inverse.
struct FusionSite {
  std::string id;  // the LayerNorm's name
  std::size_t predecessor = 0;
  std::vector<std::size_t> consumers;
  std::size_t channel_count = 0;
};

/// One site per LayerNorm whose every consumer is a (non-head) linear with
/// c_in equal to the LayerNorm width. Depends on topology only.
std::vector<FusionSite> find_fusion_sites(const ModelGraph& model);

/// Trainable per-channel scale vectors keyed by FusionSite::id.
struct ScaleSet {
  std::map<std::string, Tensor> by_site;

  std::size_t total_count() const;
  const Tensor& at(const std::string& site) const;
  friend bool operator==(const ScaleSet&, const ScaleSet&) = default;
};

/// Returns a model with every consumer weight row j multiplied by s_j and
/// the site LayerNorm's gamma_j and beta_j divided by s_j. Output in exact
/// arithmetic is unchanged and no runtime scaling op remains.
/// Throws ContractError for non-positive scales or unknown sites and
/// DimensionError for length mismatches.
ModelGraph fuse_scales(const ModelGraph& model, const ScaleSet& scales);

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;  // row-major [batch × seq]
};

/// Per-layer rounding state recorded at a reference point and reused so that
/// perturbed evaluations keep the same rounding decisions. kIdentity uses
/// `offsets` (fq(w) - w), kStepAware uses `grids`.
struct FrozenRounding {
  std::map<std::string, Tensor> offsets;
  std::map<std::string, FrozenGrid> grids;
};

struct ForwardOptions {
  /// Fake-quantize every linear except the head.
  std::optional<QuantSpec> quant;
  SteMode ste = SteMode::kIdentity;
  /// Apply the equivalent transformation on the tape: consumer weights are
  /// scaled by s (then quantized) and the site input is divided by s.
  const std::vector<FusionSite>* sites = nullptr;
  const ScaleSet* scales = nullptr;
  bool scales_require_grad = false;
  bool params_require_grad = false;
  FrozenRounding* frozen_rounding = nullptr;
  bool capture_linear_outputs = false;
};

struct ForwardResult {
  ag::Var logits;  // [batch*seq × V]
  std::map<std::string, ag::Var> params;
  std::map<std::string, ag::Var> scales;
  std::map<std::string, ag::Var> linear_outputs;
};

/// Causal LM forward. Throws IndexError for ids >= vocab and DimensionError
/// when seq exceeds max_seq_len.
ForwardResult forward(ag::Tape& tape, const ModelGraph& model, const TokenBatch& tokens,
                      const ForwardOptions& options = {});

/// Logits [batch*seq × V] without keeping a tape around.
Tensor compute_logits(const ModelGraph& model, const TokenBatch& tokens);

/// Linear layers that get quantized (every kLinear; the head is excluded).
std::vector<std::string> quantizable_weights(const ModelGraph& model);

/// Model whose quantizable weights hold dequantized values, together with
/// the integer codes they came from.
struct QuantizedModel {
  ModelGraph model;
  std::map<std::string, QuantizedTensor> weights;
};

QuantizedModel quantize_model(const ModelGraph& model, const QuantSpec& spec);

}  // namespace teq
