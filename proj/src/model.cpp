// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/model.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "teq/errors.hpp"
#include "teq/random.hpp"

namespace teq {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || vocab_size == 0 || max_seq_len == 0 || mlp_ratio == 0) {
    throw ContractError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ContractError(fmt::format("d_model {} is not divisible by n_heads {}", d_model, n_heads));
  }
  if (!(ln_eps > 0.0f)) throw ContractError("ln_eps must be positive");
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kEmbedding: return "embedding";
    case LayerKind::kLayerNorm: return "layer_norm";
    case LayerKind::kLinear: return "linear";
    case LayerKind::kAttention: return "attention_compose";
    case LayerKind::kActivation: return "activation";
    case LayerKind::kResidualAdd: return "residual_add";
    case LayerKind::kLmHead: return "lm_head";
  }
  return "unknown";
}

namespace {

std::pair<std::string, std::string> split_param_name(const std::string& full) {
  const auto dot = full.rfind('.');
  if (dot == std::string::npos) throw ContractError(fmt::format("'{}' is not a <layer>.<param> name", full));
  return {full.substr(0, dot), full.substr(dot + 1)};
}

}  // namespace

std::vector<std::string> ModelGraph::param_names() const {
  std::vector<std::string> names;
  for (const Layer& layer : layers) {
    for (const auto& [pname, _] : layer.params) names.push_back(layer.name + "." + pname);
  }
  return names;
}

std::size_t ModelGraph::layer_index(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  throw ContractError(fmt::format("no layer named '{}'", name));
}

const Tensor& ModelGraph::param(const std::string& full_name) const {
  const auto [layer, pname] = split_param_name(full_name);
  const auto& params = layers[layer_index(layer)].params;
  const auto it = params.find(pname);
  if (it == params.end()) throw ContractError(fmt::format("no parameter named '{}'", full_name));
  return it->second;
}

Tensor& ModelGraph::param(const std::string& full_name) {
  return const_cast<Tensor&>(std::as_const(*this).param(full_name));
}

std::size_t ModelGraph::param_count() const {
  std::size_t total = 0;
  for (const Layer& layer : layers) {
    for (const auto& [_, t] : layer.params) total += t.numel();
  }
  return total;
}

void ModelGraph::validate() const {
  config.validate();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& layer = layers[i];
    for (int in : layer.inputs) {
      if (in == kTokenInput ? layer.kind != LayerKind::kEmbedding : (in < 0 || std::size_t(in) >= i)) {
        throw ContractError(fmt::format("layer '{}' has invalid input ref {}", layer.name, in));
      }
    }
    auto need = [&](const char* pname, std::size_t rank) {
      const auto it = layer.params.find(pname);
      if (it == layer.params.end() || it->second.rank() != rank) {
        throw ContractError(fmt::format("layer '{}' lacks a rank-{} '{}' parameter", layer.name, rank, pname));
      }
      return it->second.shape();
    };
    switch (layer.kind) {
      case LayerKind::kEmbedding:
        need("token", 2);
        need("position", 2);
        break;
      case LayerKind::kLayerNorm:
        if (need("gamma", 1) != need("beta", 1)) throw ContractError(fmt::format("layer '{}' gamma/beta mismatch", layer.name));
        break;
      case LayerKind::kLinear:
      case LayerKind::kLmHead:
        need("weight", 2);
        break;
      default:
        break;
    }
  }
  if (layers.empty() || layers.back().kind != LayerKind::kLmHead) {
    throw ContractError("model graph must end with an lm_head layer");
  }
}

ModelGraph build_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t hidden = config.mlp_ratio * d;
  ModelGraph model{config, {}};
  auto& layers = model.layers;
  auto push = [&layers](std::string name, LayerKind kind, std::vector<int> inputs,
                        std::map<std::string, Tensor> params = {}) {
    layers.push_back(Layer{std::move(name), kind, std::move(inputs), std::move(params)});
    return int(layers.size() - 1);
  };
  auto ln = [&](std::string name, int input) {
    return push(std::move(name), LayerKind::kLayerNorm, {input},
                {{"gamma", Tensor({d}, 1.0f)}, {"beta", Tensor({d}, 0.0f)}});
  };
  auto linear = [&](std::string name, int input, std::size_t c_in, std::size_t c_out) {
    return push(std::move(name), LayerKind::kLinear, {input}, {{"weight", Tensor({c_in, c_out})}});
  };

  int h = push("embed", LayerKind::kEmbedding, {kTokenInput},
               {{"token", Tensor({config.vocab_size, d})}, {"position", Tensor({config.max_seq_len, d})}});
  for (std::size_t b = 0; b < config.n_layers; ++b) {
    const std::string p = fmt::format("blocks.{}.", b);
    const int ln1 = ln(p + "ln1", h);
    const int q = linear(p + "attn.q", ln1, d, d);
    const int k = linear(p + "attn.k", ln1, d, d);
    const int v = linear(p + "attn.v", ln1, d, d);
    const int attn = push(p + "attn", LayerKind::kAttention, {q, k, v});
    const int o = linear(p + "attn.o", attn, d, d);
    const int res1 = push(p + "res1", LayerKind::kResidualAdd, {h, o});
    const int ln2 = ln(p + "ln2", res1);
    const int up = linear(p + "mlp.up", ln2, d, hidden);
    const int act = push(p + "mlp.act", LayerKind::kActivation, {up});
    const int down = linear(p + "mlp.down", act, hidden, d);
    h = push(p + "res2", LayerKind::kResidualAdd, {res1, down});
  }
  const int lnf = ln("ln_f", h);
  push("lm_head", LayerKind::kLmHead, {lnf}, {{"weight", Tensor({d, config.vocab_size})}});

  Rng rng(seed);
  const float residual_std = 0.02f / std::sqrt(2.0f * float(std::max<std::size_t>(config.n_layers, 1)));
  for (Layer& layer : layers) {
    if (layer.kind == LayerKind::kLayerNorm) continue;
    const bool residual_out = layer.name.ends_with("attn.o") || layer.name.ends_with("mlp.down");
    for (auto& [_, t] : layer.params) {
      for (float& w : t.data()) w = rng.normal(0.0f, residual_out ? residual_std : 0.02f);
    }
  }
  return model;
}

std::size_t expected_param_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t per_block = 2 * (2 * d) + 4 * d * d + 2 * d * (c.mlp_ratio * d);
  return c.vocab_size * d + c.max_seq_len * d + c.n_layers * per_block + 2 * d + d * c.vocab_size;
}

std::vector<FusionSite> find_fusion_sites(const ModelGraph& model) {
  std::vector<FusionSite> sites;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& ln = model.layers[i];
    if (ln.kind != LayerKind::kLayerNorm) continue;
    const std::size_t width = ln.params.at("gamma").numel();
    FusionSite site{ln.name, i, {}, width};
    bool eligible = true;
    for (std::size_t j = i + 1; j < model.layers.size(); ++j) {
      const Layer& consumer = model.layers[j];
      if (std::find(consumer.inputs.begin(), consumer.inputs.end(), int(i)) == consumer.inputs.end()) continue;
      if (consumer.kind != LayerKind::kLinear || consumer.params.at("weight").dim(0) != width) {
        eligible = false;
        break;
      }
      site.consumers.push_back(j);
    }
    if (eligible && !site.consumers.empty()) sites.push_back(std::move(site));
  }
  return sites;
}

std::size_t ScaleSet::total_count() const {
  std::size_t n = 0;
  for (const auto& [_, s] : by_site) n += s.numel();
  return n;
}

const Tensor& ScaleSet::at(const std::string& site) const {
  const auto it = by_site.find(site);
  if (it == by_site.end()) throw ContractError(fmt::format("no scales for site '{}'", site));
  return it->second;
}

namespace {

const FusionSite& site_by_id(const std::vector<FusionSite>& sites, const std::string& id) {
  for (const FusionSite& s : sites) {
    if (s.id == id) return s;
  }
  throw ContractError(fmt::format("'{}' is not a fusion site of this model", id));
}

void check_site_scales(const FusionSite& site, const Tensor& s) {
  if (s.rank() != 1 || s.numel() != site.channel_count) {
    throw DimensionError(fmt::format("site '{}' has {} channels but scales have shape {}", site.id,
                                     site.channel_count, shape_string(s.shape())));
  }
  for (std::size_t j = 0; j < s.numel(); ++j) {
    if (!(s[j] > 0.0f) || !std::isfinite(s[j])) {
      throw ContractError(fmt::format("site '{}' scale {} = {} is not a positive finite value", site.id, j, s[j]));
    }
  }
}

}  // namespace

ModelGraph fuse_scales(const ModelGraph& model, const ScaleSet& scales) {
  const std::vector<FusionSite> sites = find_fusion_sites(model);
  for (const auto& [id, s] : scales.by_site) check_site_scales(site_by_id(sites, id), s);

  ModelGraph fused = model;
  for (const auto& [id, s] : scales.by_site) {
    const FusionSite& site = site_by_id(sites, id);
    Layer& ln = fused.layers[site.predecessor];
    Tensor& gamma = ln.params.at("gamma");
    Tensor& beta = ln.params.at("beta");
    for (std::size_t j = 0; j < s.numel(); ++j) {
      gamma[j] /= s[j];
      beta[j] /= s[j];
    }
    for (std::size_t c : site.consumers) {
      Tensor& w = fused.layers[c].params.at("weight");
      const std::size_t c_out = w.dim(1);
      for (std::size_t j = 0; j < s.numel(); ++j) {
        for (std::size_t o = 0; o < c_out; ++o) w.at(j, o) *= s[j];
      }
    }
  }
  return fused;
}

ForwardResult forward(ag::Tape& tape, const ModelGraph& model, const TokenBatch& tokens,
                      const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  if (tokens.ids.size() != tokens.batch * tokens.seq || tokens.seq == 0) {
    throw DimensionError(fmt::format("token batch {}x{} holds {} ids", tokens.batch, tokens.seq, tokens.ids.size()));
  }
  if (tokens.seq > cfg.max_seq_len) {
    throw DimensionError(fmt::format("sequence length {} exceeds max_seq_len {}", tokens.seq, cfg.max_seq_len));
  }
  if (options.scales != nullptr && options.sites == nullptr) {
    throw ContractError("forward: scales given without fusion sites");
  }
  if (options.quant) options.quant->validate();

  ForwardResult result;
  std::map<std::size_t, std::string> site_of_ln;
  std::map<std::size_t, std::string> site_of_consumer;
  if (options.scales != nullptr) {
    for (const FusionSite& site : *options.sites) {
      const auto it = options.scales->by_site.find(site.id);
      if (it == options.scales->by_site.end()) continue;
      check_site_scales(site, it->second);
      result.scales[site.id] = tape.leaf(it->second, options.scales_require_grad);
      site_of_ln[site.predecessor] = site.id;
      for (std::size_t c : site.consumers) site_of_consumer[c] = site.id;
    }
  }

  auto param = [&](const Layer& layer, const std::string& pname) {
    ag::Var v = tape.leaf(layer.params.at(pname), options.params_require_grad);
    result.params[layer.name + "." + pname] = v;
    return v;
  };

  std::vector<ag::Var> out(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& layer = model.layers[i];
    auto in = [&](std::size_t k) { return out[std::size_t(layer.inputs.at(k))]; };
    switch (layer.kind) {
      case LayerKind::kEmbedding: {
        std::vector<std::int32_t> positions(tokens.ids.size());
        for (std::size_t r = 0; r < positions.size(); ++r) positions[r] = std::int32_t(r % tokens.seq);
        ag::Var tok = ag::embedding(param(layer, "token"), tokens.ids);
        ag::Var pos = ag::embedding(param(layer, "position"), positions);
        out[i] = ag::add(tok, pos);
        break;
      }
      case LayerKind::kLayerNorm: {
        out[i] = ag::layer_norm(in(0), param(layer, "gamma"), param(layer, "beta"), cfg.ln_eps);
        if (const auto it = site_of_ln.find(i); it != site_of_ln.end()) {
          out[i] = ag::unscale_channels(out[i], result.scales.at(it->second), 1);
        }
        break;
      }
      case LayerKind::kLinear: {
        ag::Var w = param(layer, "weight");
        if (const auto it = site_of_consumer.find(i); it != site_of_consumer.end()) {
          w = ag::scale_channels(w, result.scales.at(it->second), 0);
        }
        if (options.quant) {
          const QuantSpec spec{options.quant->n_bits, options.quant->group_size, 0};
          const bool step_aware = options.ste == SteMode::kStepAware;
          if (options.frozen_rounding != nullptr && step_aware) {
            auto [slot, fresh] = options.frozen_rounding->grids.try_emplace(layer.name);
            if (fresh) slot->second = freeze_grid(w.value(), spec);
            w = frozen_fake_quant(w, spec, slot->second);
          } else if (options.frozen_rounding != nullptr) {
            auto [slot, fresh] = options.frozen_rounding->offsets.try_emplace(layer.name);
            if (fresh) {
              Tensor offset = fake_quant_values(w.value(), spec);
              for (std::size_t e = 0; e < offset.numel(); ++e) offset[e] -= w.value()[e];
              slot->second = std::move(offset);
            }
            w = ag::add_constant(w, slot->second);
          } else {
            w = fake_quant(w, spec, options.ste);
          }
        }
        out[i] = ag::matmul(in(0), w);
        if (options.capture_linear_outputs) result.linear_outputs[layer.name] = out[i];
        break;
      }
      case LayerKind::kAttention:
        out[i] = ag::causal_attention(in(0), in(1), in(2), tokens.batch, tokens.seq, cfg.n_heads);
        break;
      case LayerKind::kActivation:
        out[i] = ag::gelu(in(0));
        break;
      case LayerKind::kResidualAdd:
        out[i] = ag::add(in(0), in(1));
        break;
      case LayerKind::kLmHead:
        out[i] = ag::matmul(in(0), param(layer, "weight"));
        break;
    }
  }
  result.logits = out.back();
  return result;
}

Tensor compute_logits(const ModelGraph& model, const TokenBatch& tokens) {
  ag::Tape tape;
  return forward(tape, model, tokens).logits.value();
}

std::vector<std::string> quantizable_weights(const ModelGraph& model) {
  std::vector<std::string> names;
  for (const Layer& layer : model.layers) {
    if (layer.kind == LayerKind::kLinear) names.push_back(layer.name + ".weight");
  }
  return names;
}

QuantizedModel quantize_model(const ModelGraph& model, const QuantSpec& spec) {
  const QuantSpec weight_spec{spec.n_bits, spec.group_size, 0};
  QuantizedModel qm{model, {}};
  for (const std::string& name : quantizable_weights(model)) {
    QuantizedTensor qt = quantize(model.param(name), weight_spec);
    qm.model.param(name) = dequantize(qt);
    qm.weights.emplace(name, std::move(qt));
  }
  return qm;
}

}  // namespace teq
