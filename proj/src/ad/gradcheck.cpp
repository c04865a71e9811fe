#include "melon/ad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace melon::ad {

GradCheckResult gradient_check(const std::function<Tensor<double>()>& f,
                               std::vector<Tensor<double>> leaves,
                               const GradCheckOptions& options) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  {
    Tensor<double> loss = f();
    loss.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& leaf : leaves) {
    if (leaf.has_grad()) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    else analytic.emplace_back(leaf.numel(), 0.0);
  }

  NoGrad no_grad;
  const double f0 = f().item();
  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    std::vector<std::size_t> entries(leaf.numel());
    std::iota(entries.begin(), entries.end(), 0);
    if (options.max_entries_per_leaf > 0 && entries.size() > options.max_entries_per_leaf) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(options.max_entries_per_leaf);
      std::sort(entries.begin(), entries.end());
    }
    auto data = leaf.mutable_data();
    for (auto k : entries) {
      const double orig = data[k];
      data[k] = orig + options.h;
      const double fp = f().item();
      data[k] = orig - options.h;
      const double fm = f().item();
      data[k] = orig;

      const double right = (fp - f0) / options.h;
      const double left = (f0 - fm) / options.h;
      const double slope_scale = std::max({1.0, std::abs(right), std::abs(left)});
      if (std::abs(right - left) > options.kink_tolerance * slope_scale) {
        ++result.kinks_skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * options.h);
      const double a = analytic[li][k];
      const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++result.checked;
      if (result.worst.empty() || rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = "leaf" + std::to_string(li) + "[" + std::to_string(k) + "]";
      }
    }
  }
  return result;
}

double gradient_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                      Tensor<double> x, double h) {
  GradCheckOptions opt;
  opt.h = h;
  return gradient_check([&] { return f(x); }, {x}, opt).max_rel_error;
}

}  // namespace melon::ad
