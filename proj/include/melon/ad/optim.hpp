#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "melon/ad/tensor.hpp"

namespace melon::ad {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed parameter list. Parameters without a
// gradient are treated as having a zero gradient.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamOptions options);

  void step();
  void zero_grad();

  std::size_t steps() const { return step_; }
  const AdamOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }
  std::span<const T> first_moment(std::size_t i) const { return m_[i]; }
  std::span<const T> second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamOptions opt_;
  std::size_t step_ = 0;
};

extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace melon::ad
