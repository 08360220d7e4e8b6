// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "teq/model.hpp"
#include "teq/tensor.hpp"

namespace teq {

/// File layout (all integers little-endian):
///
///   "TEQF" | u32 version (=1) | u64 header length | header | payload
///
/// The header is UTF-8 JSON with a "tensors" array of
/// {name, dtype: "f32"|"i32", shape, offset, nbytes}; offsets are relative
/// to the payload start, multiples of 4, and tensors are laid out in array
/// order. Remaining header keys (kind, config, quant, ...) are free-form.
inline constexpr char kCheckpointMagic[4] = {'T', 'E', 'Q', 'F'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType { kF32, kI32 };

struct StoredTensor {
  std::string name;
  DType dtype = DType::kF32;
  Shape shape;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;
};

struct Container {
  nlohmann::json header = nlohmann::json::object();  // without "tensors"
  std::vector<StoredTensor> tensors;

  const StoredTensor& find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_container(const Container& container);
/// Throws FormatError on bad magic, unsupported version, malformed header or
/// a payload that is shorter or longer than the header declares.
Container decode_container(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// What a checkpoint file holds once loaded. For quantized checkpoints the
/// model's quantized weights are already dequantized and `quantized`
/// carries the codes they came from.
struct LoadedCheckpoint {
  ModelGraph model;
  std::map<std::string, QuantizedTensor> quantized;
  bool is_quantized() const { return !quantized.empty(); }
};

Container model_container(const ModelGraph& model);
Container model_container(const QuantizedModel& model);
LoadedCheckpoint checkpoint_from_container(const Container& container);

void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path);
void save_checkpoint(const QuantizedModel& model, const std::filesystem::path& path);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Scale files reuse the container with kind "scales"; one f32 tensor per site.
Container scales_container(const ScaleSet& scales, const nlohmann::json& meta = nlohmann::json::object());
ScaleSet scales_from_container(const Container& container);
void save_scales(const ScaleSet& scales, const std::filesystem::path& path,
                 const nlohmann::json& meta = nlohmann::json::object());
ScaleSet load_scales(const std::filesystem::path& path);

/// 64-bit FNV-1a, printed as 16 hex digits.
std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);
std::string file_hash(const std::filesystem::path& path);

}  // namespace teq
