// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <fmt/format.h>

#include "teq/errors.hpp"

namespace teq {

using nlohmann::json;

namespace {

constexpr std::size_t kPreambleSize = 4 + 4 + 8;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

const char* dtype_name(DType d) { return d == DType::kF32 ? "f32" : "i32"; }

std::size_t element_count(const StoredTensor& t) { return t.dtype == DType::kF32 ? t.f32.size() : t.i32.size(); }

}  // namespace

const StoredTensor& Container::find(const std::string& name) const {
  for (const StoredTensor& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError(fmt::format("checkpoint has no tensor named '{}'", name));
}

std::vector<std::uint8_t> encode_container(const Container& container) {
  json header = container.header;
  json entries = json::array();
  std::uint64_t offset = 0;
  for (const StoredTensor& t : container.tensors) {
    if (element_count(t) != shape_numel(t.shape)) {
      throw DimensionError(fmt::format("tensor '{}' has {} values for shape {}", t.name, element_count(t),
                                       shape_string(t.shape)));
    }
    const std::uint64_t nbytes = 4 * element_count(t);
    entries.push_back({{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape},
                       {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = std::move(entries);
  const std::string text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(kPreambleSize + text.size() + offset);
  out.insert(out.end(), std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const StoredTensor& t : container.tensors) {
    if (t.dtype == DType::kF32) {
      for (float v : t.f32) put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
      for (std::int32_t v : t.i32) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
  }
  return out;
}

Container decode_container(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kPreambleSize) {
    throw FormatError(fmt::format("file too short for a checkpoint preamble: {} bytes", bytes.size()));
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad magic: not a TEQF checkpoint");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kCheckpointVersion) {
    throw FormatError(fmt::format("unsupported checkpoint format version {} (expected {})", version, kCheckpointVersion));
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - kPreambleSize) {
    throw FormatError(fmt::format("header length {} exceeds file size {}", header_len, bytes.size()));
  }
  json header;
  try {
    header = json::parse(bytes.begin() + kPreambleSize, bytes.begin() + std::ptrdiff_t(kPreambleSize + header_len));
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed checkpoint header: {}", e.what()));
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw FormatError("checkpoint header lacks a tensors array");
  }

  Container container;
  const std::uint8_t* payload = bytes.data() + kPreambleSize + header_len;
  const std::uint64_t payload_size = bytes.size() - kPreambleSize - header_len;
  std::uint64_t expected = 0;
  try {
    for (const json& e : header["tensors"]) {
      StoredTensor t;
      t.name = e.at("name").get<std::string>();
      const std::string dtype = e.at("dtype").get<std::string>();
      if (dtype == "f32") {
        t.dtype = DType::kF32;
      } else if (dtype == "i32") {
        t.dtype = DType::kI32;
      } else {
        throw FormatError(fmt::format("tensor '{}' has unknown dtype '{}'", t.name, dtype));
      }
      t.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto nbytes = e.at("nbytes").get<std::uint64_t>();
      if (offset != expected || offset % 4 != 0 || nbytes != 4 * shape_numel(t.shape)) {
        throw FormatError(fmt::format("tensor '{}' has inconsistent offset {} / size {}", t.name, offset, nbytes));
      }
      expected += nbytes;
      container.tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed tensor entry: {}", e.what()));
  }
  if (payload_size != expected) {
    throw FormatError(fmt::format("payload size mismatch: header declares {} bytes, file holds {}", expected, payload_size));
  }

  std::uint64_t offset = 0;
  for (StoredTensor& t : container.tensors) {
    const std::size_t n = shape_numel(t.shape);
    if (t.dtype == DType::kF32) {
      t.f32.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.f32[i] = std::bit_cast<float>(get_u32(payload + offset + 4 * i));
    } else {
      t.i32.resize(n);
      for (std::size_t i = 0; i < n; ++i) t.i32[i] = std::bit_cast<std::int32_t>(get_u32(payload + offset + 4 * i));
    }
    offset += 4 * n;
  }
  header.erase("tensors");
  container.header = std::move(header);
  return container;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open '{}'", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write '{}'", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw DataError(fmt::format("short write to '{}'", path.string()));
}

json config_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},       {"n_heads", c.n_heads},     {"n_layers", c.n_layers},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"mlp_ratio", c.mlp_ratio},
          {"ln_eps", c.ln_eps}};
}

ModelConfig config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    c.ln_eps = j.at("ln_eps").get<float>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("malformed model config: {}", e.what()));
  } catch (const ContractError& e) {
    throw FormatError(fmt::format("invalid model config: {}", e.what()));
  }
}

namespace {

Container model_container_impl(const ModelGraph& model, const std::map<std::string, QuantizedTensor>* quantized) {
  Container c;
  c.header["kind"] = quantized ? "quantized_model" : "model";
  c.header["config"] = config_to_json(model.config);
  json quant = json::object();
  for (const std::string& name : model.param_names()) {
    if (quantized) {
      if (const auto it = quantized->find(name); it != quantized->end()) {
        const QuantizedTensor& qt = it->second;
        c.tensors.push_back(StoredTensor{name, DType::kI32, qt.shape, {}, qt.codes});
        c.tensors.push_back(StoredTensor{name + ".scales", DType::kF32, {qt.scales.size()}, qt.scales, {}});
        quant[name] = {{"n_bits", qt.spec.n_bits},
                       {"group_size", qt.spec.group_size},
                       {"axis", qt.spec.axis},
                       {"scales", name + ".scales"}};
        continue;
      }
    }
    const Tensor& t = model.param(name);
    c.tensors.push_back(StoredTensor{name, DType::kF32, t.shape(), t.values(), {}});
  }
  if (quantized) c.header["quant"] = std::move(quant);
  return c;
}

}  // namespace

Container model_container(const ModelGraph& model) { return model_container_impl(model, nullptr); }

Container model_container(const QuantizedModel& model) { return model_container_impl(model.model, &model.weights); }

LoadedCheckpoint checkpoint_from_container(const Container& c) {
  const std::string kind = c.header.value("kind", "");
  if (kind != "model" && kind != "quantized_model") {
    throw FormatError(fmt::format("expected a model checkpoint, found kind '{}'", kind));
  }
  if (!c.header.contains("config")) throw FormatError("model checkpoint lacks a config");
  LoadedCheckpoint out{build_model(config_from_json(c.header["config"]), 0), {}};
  const json quant = c.header.value("quant", json::object());

  std::set<std::string> consumed;
  for (const std::string& name : out.model.param_names()) {
    Tensor& dst = out.model.param(name);
    const StoredTensor& src = c.find(name);
    if (src.shape != dst.shape()) {
      throw FormatError(fmt::format("tensor '{}' has shape {}, model expects {}", name, shape_string(src.shape),
                                    shape_string(dst.shape())));
    }
    consumed.insert(name);
    if (quant.contains(name)) {
      if (src.dtype != DType::kI32) throw FormatError(fmt::format("quantized tensor '{}' must be i32", name));
      try {
        const json& q = quant[name];
        QuantizedTensor qt;
        qt.shape = src.shape;
        qt.codes = src.i32;
        qt.spec = QuantSpec{q.at("n_bits").get<int>(), q.at("group_size").get<int>(), q.at("axis").get<std::size_t>()};
        const std::string scales_name = q.at("scales").get<std::string>();
        const StoredTensor& s = c.find(scales_name);
        if (s.dtype != DType::kF32) throw FormatError(fmt::format("scales '{}' must be f32", scales_name));
        qt.scales = s.f32;
        qt.spec.validate();
        const std::int32_t n = qt.spec.clip_n();
        for (std::size_t i = 0; i < qt.codes.size(); ++i) {
          if (qt.codes[i] < -n || qt.codes[i] > n) {
            throw FormatError(fmt::format("code {} at index {} of '{}' is outside [-{}, {}]", qt.codes[i], i, name, n, n));
          }
        }
        for (float v : qt.scales) {
          if (!(v > 0.0f) || !std::isfinite(v)) throw FormatError(fmt::format("scales of '{}' must be positive and finite", name));
        }
        consumed.insert(scales_name);
        dst = dequantize(qt);
        out.quantized.emplace(name, std::move(qt));
      } catch (const json::exception& e) {
        throw FormatError(fmt::format("malformed quant metadata for '{}': {}", name, e.what()));
      } catch (const ContractError& e) {
        throw FormatError(fmt::format("invalid quant metadata for '{}': {}", name, e.what()));
      } catch (const DimensionError& e) {
        throw FormatError(fmt::format("invalid quantized tensor '{}': {}", name, e.what()));
      }
    } else {
      if (src.dtype != DType::kF32) throw FormatError(fmt::format("tensor '{}' must be f32", name));
      dst = Tensor(src.shape, src.f32);
    }
  }
  for (const StoredTensor& t : c.tensors) {
    if (!consumed.contains(t.name)) throw FormatError(fmt::format("unexpected tensor '{}' in checkpoint", t.name));
  }
  return out;
}

void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_container(model_container(model)));
}

void save_checkpoint(const QuantizedModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, encode_container(model_container(model)));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_container(decode_container(read_file_bytes(path)));
}

Container scales_container(const ScaleSet& scales, const json& meta) {
  Container c;
  c.header = meta;
  c.header["kind"] = "scales";
  for (const auto& [site, s] : scales.by_site) {
    c.tensors.push_back(StoredTensor{site, DType::kF32, s.shape(), s.values(), {}});
  }
  return c;
}

ScaleSet scales_from_container(const Container& c) {
  if (c.header.value("kind", "") != "scales") {
    throw FormatError(fmt::format("expected a scales file, found kind '{}'", c.header.value("kind", "")));
  }
  ScaleSet scales;
  for (const StoredTensor& t : c.tensors) {
    if (t.dtype != DType::kF32 || t.shape.size() != 1) {
      throw FormatError(fmt::format("scale tensor '{}' must be a rank-1 f32 vector", t.name));
    }
    scales.by_site.emplace(t.name, Tensor(t.shape, t.f32));
  }
  return scales;
}

void save_scales(const ScaleSet& scales, const std::filesystem::path& path, const json& meta) {
  write_file_bytes(path, encode_container(scales_container(scales, meta)));
}

ScaleSet load_scales(const std::filesystem::path& path) {
  return scales_from_container(decode_container(read_file_bytes(path)));
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) { return fmt::format("{:016x}", value); }

std::string file_hash(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace teq
