#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace melon::ad {

// One output coordinate of a half-pixel-centre linear resampling:
// out = (1 - frac) * in[lo] + frac * in[hi].
struct LinearTap {
  std::size_t lo;
  std::size_t hi;
  double frac;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace melon::ad
