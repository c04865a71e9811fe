#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "melon/ad/tensor.hpp"

namespace melon::ad {

struct GradCheckOptions {
  double h = 1e-5;
  // 0 checks every entry; otherwise a seeded random subset per leaf.
  std::size_t max_entries_per_leaf = 0;
  std::uint64_t seed = 0;
  // One-sided slopes disagreeing by more than this (relative) mark a
  // non-differentiable point, which is excluded from the comparison.
  double kink_tolerance = 1e-3;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks_skipped = 0;
  std::string worst;  // "leaf[i]" of the worst entry
};

// Central finite differences against reverse-mode gradients of a scalar
// function of several leaves, in 64-bit. Relative error per entry is
// |a - n| / max(1, |a|, |n|).
GradCheckResult gradient_check(const std::function<Tensor<double>()>& f,
                               std::vector<Tensor<double>> leaves,
                               const GradCheckOptions& options = {});

// Single-input form: f(x) scalar.
double gradient_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                      Tensor<double> x, double h = 1e-5);

}  // namespace melon::ad
