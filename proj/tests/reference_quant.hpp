// Copyright 2026 The teq-toolkit Authors
// SPDX-License-Identifier: Apache-2.0

// Scalar quantizer oracle for tests. Works one element at a time from
// explicit (row, col) coordinates and shares no code with teq/quant.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace teq::testing {

struct ReferenceQuant {
  std::vector<std::int32_t> codes;
  std::vector<float> dequant;
  std::vector<float> element_scale;  // scale used by each element
};

/// w is [rows × cols] row-major; groups run along `axis`
/// (axis 0: down each column, axis 1: along each row).
inline ReferenceQuant reference_quantize(const std::vector<float>& w, std::size_t rows, std::size_t cols, int n_bits,
                                         int group_size, int axis) {
  const int clip = (1 << (n_bits - 1)) - 1;
  const std::size_t line_len = axis == 0 ? rows : cols;
  const std::size_t glen =
      group_size < 0 || std::size_t(group_size) > line_len ? line_len : std::size_t(group_size);
  ReferenceQuant out;
  out.codes.resize(w.size());
  out.dequant.resize(w.size());
  out.element_scale.resize(w.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t pos = axis == 0 ? r : c;
      const std::size_t gstart = pos / glen * glen;
      const std::size_t gend = gstart + glen < line_len ? gstart + glen : line_len;
      float mx = 0.0f;
      for (std::size_t p = gstart; p < gend; ++p) {
        const float v = axis == 0 ? w[p * cols + c] : w[r * cols + p];
        const float a = v < 0.0f ? -v : v;
        if (a > mx) mx = a;
      }
      float s;
      if (mx == 0.0f) {
        s = 1e-8f;
      } else {
        const float raw = mx / float(clip);
        const float snapped = (float(clip) * raw) / float(clip);
        s = std::isfinite(snapped) ? snapped : raw;
      }
      const float x = w[r * cols + c] / s;
      // Round half away from zero, written out by hand.
      float t = std::trunc(x);
      const float frac = x - t;
      if (frac >= 0.5f) t += 1.0f;
      if (frac <= -0.5f) t -= 1.0f;
      if (t > float(clip)) t = float(clip);
      if (t < -float(clip)) t = -float(clip);
      const std::int32_t q = std::int32_t(t);
      out.codes[r * cols + c] = q;
      out.element_scale[r * cols + c] = s;
      out.dequant[r * cols + c] = float(q) * s;
    }
  }
  return out;
}

}  // namespace teq::testing
