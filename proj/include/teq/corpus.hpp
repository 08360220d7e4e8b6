// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "teq/model.hpp"

namespace teq {

/// Every byte is a token in [0, 256).
std::vector<std::int32_t> bytes_to_tokens(std::string_view text);
std::vector<std::int32_t> load_text_tokens(const std::filesystem::path& path);

/// Number of non-overlapping windows of seq_len inputs (plus one shifted
/// target each) that fit in n tokens.
std::size_t window_count(std::size_t n_tokens, std::size_t seq_len);

/// Inputs and next-token targets for a batch of windows; window w covers
/// tokens[w*seq_len, w*seq_len + seq_len] inclusive.
struct WindowBatch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;
};

WindowBatch make_window_batch(std::span<const std::int32_t> tokens, std::span<const std::size_t> windows,
                              std::size_t seq_len);

/// Batch of windows starting at arbitrary offsets (used for pretraining).
WindowBatch make_offset_batch(std::span<const std::int32_t> tokens, std::span<const std::size_t> offsets,
                              std::size_t seq_len);

/// Seeded English-like prose from a small grammar: sentences, punctuation,
/// numbers and paragraphs. Deterministic for a given (bytes, seed).
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);

}  // namespace teq
