// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "teq/corpus.hpp"

#include <array>
#include <cctype>

#include <fmt/format.h>

#include "teq/checkpoint.hpp"
#include "teq/errors.hpp"
#include "teq/random.hpp"

namespace teq {

std::vector<std::int32_t> bytes_to_tokens(std::string_view text) {
  std::vector<std::int32_t> tokens(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) tokens[i] = std::int32_t(static_cast<unsigned char>(text[i]));
  return tokens;
}

std::vector<std::int32_t> load_text_tokens(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  std::vector<std::int32_t> tokens(bytes.begin(), bytes.end());
  return tokens;
}

std::size_t window_count(std::size_t n_tokens, std::size_t seq_len) {
  if (seq_len == 0) throw ContractError("seq_len must be positive");
  return n_tokens == 0 ? 0 : (n_tokens - 1) / seq_len;
}

WindowBatch make_window_batch(std::span<const std::int32_t> tokens, std::span<const std::size_t> windows,
                              std::size_t seq_len) {
  std::vector<std::size_t> offsets(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) offsets[i] = windows[i] * seq_len;
  return make_offset_batch(tokens, offsets, seq_len);
}

WindowBatch make_offset_batch(std::span<const std::int32_t> tokens, std::span<const std::size_t> offsets,
                              std::size_t seq_len) {
  WindowBatch wb;
  wb.inputs.batch = offsets.size();
  wb.inputs.seq = seq_len;
  wb.inputs.ids.reserve(offsets.size() * seq_len);
  wb.targets.reserve(offsets.size() * seq_len);
  for (std::size_t start : offsets) {
    if (start + seq_len + 1 > tokens.size()) {
      throw DataError(fmt::format("window at {} of length {} overruns {} tokens", start, seq_len, tokens.size()));
    }
    wb.inputs.ids.insert(wb.inputs.ids.end(), tokens.begin() + start, tokens.begin() + start + seq_len);
    wb.targets.insert(wb.targets.end(), tokens.begin() + start + 1, tokens.begin() + start + seq_len + 1);
  }
  return wb;
}

namespace {

constexpr std::array kNames = {"the farmer", "a young engineer", "the old captain", "my neighbor", "the teacher",
                               "a quiet child", "the baker", "our doctor", "the river pilot", "a tired student",
                               "the mayor", "her brother", "the gardener", "a traveling musician", "the clerk"};
constexpr std::array kObjects = {"the bridge", "a letter", "the garden", "an old map", "the market",
                                 "a wooden boat", "the north road", "some bread", "the lamp", "a small house",
                                 "the harbor", "the winter coat", "a long story", "the clock tower", "the field"};
constexpr std::array kVerbs = {"watched", "repaired", "painted", "carried", "found", "visited", "described",
                               "measured", "cleaned", "remembered", "opened", "followed", "built", "sold"};
constexpr std::array kAdjectives = {"bright", "heavy", "narrow", "green", "cold", "gentle", "broken", "silver",
                                    "early", "careful", "distant", "warm"};
constexpr std::array kAdverbs = {"slowly", "carefully", "again", "quietly", "before noon", "at dawn",
                                 "after the rain", "every morning", "without a word", "once more"};
constexpr std::array kLinks = {"because", "while", "although", "and then", "so", "but"};
constexpr std::array kPlaces = {"near the station", "in the valley", "by the sea", "on the hill",
                                "behind the school", "across the square", "inside the mill"};

template <typename Array>
const char* pick(Rng& rng, const Array& words) {
  // Squared uniform skews towards the head of each list.
  const float u = rng.uniform();
  return words[std::size_t(u * u * float(words.size()))];
}

std::string clause(Rng& rng) {
  std::string s = pick(rng, kNames);
  s += ' ';
  s += pick(rng, kVerbs);
  s += ' ';
  if (rng.uniform() < 0.4f) {
    std::string obj = pick(rng, kObjects);
    const auto space = obj.find(' ');
    s += obj.substr(0, space) + " " + pick(rng, kAdjectives) + obj.substr(space);
  } else {
    s += pick(rng, kObjects);
  }
  const float r = rng.uniform();
  if (r < 0.3f) {
    s += std::string(" ") + pick(rng, kAdverbs);
  } else if (r < 0.55f) {
    s += std::string(" ") + pick(rng, kPlaces);
  } else if (r < 0.65f) {
    s += fmt::format(" for {} days", 2 + rng.below(28));
  }
  return s;
}

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  std::string text;
  text.reserve(bytes + 256);
  std::size_t sentences_in_paragraph = 0;
  while (text.size() < bytes) {
    std::string sentence = clause(rng);
    if (rng.uniform() < 0.35f) sentence += std::string(", ") + pick(rng, kLinks) + " " + clause(rng);
    sentence[0] = char(std::toupper(static_cast<unsigned char>(sentence[0])));
    sentence += rng.uniform() < 0.9f ? ". " : "? ";
    text += sentence;
    if (++sentences_in_paragraph >= 3 + rng.below(5)) {
      text.back() = '\n';
      text += '\n';
      sentences_in_paragraph = 0;
    }
  }
  text.resize(bytes);
  return text;
}

}  // namespace teq
