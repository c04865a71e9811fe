#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "melon/ad/ops.hpp"

// Small building blocks shared by the encoders.
namespace melon::nn {

using ad::Shape;
using ad::Tensor;

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> constant_param(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

// y = x W^T + b for x [N, in] or [in]; W is [out, in].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param<T>({out, in}, bound, rng);
    if (with_bias) bias = uniform_param<T>({out}, bound, rng);
  }

  std::size_t in_features() const { return weight.size(1); }
  std::size_t out_features() const { return weight.size(0); }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() == 1) {
      return ad::reshape((*this)(ad::reshape(x, {1, x.numel()})), {out_features()});
    }
    Tensor<T> y = ad::matmul(x, weight, false, true);
    return bias.defined() ? ad::add(y, bias) : y;
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }
};

// Deterministic 64-bit mixing for deriving per-step seeds from a base seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Per-forward stochastic context. Disabled means evaluation mode.
struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t next(std::uint64_t salt) const { return mix_seed(seed, salt); }
};

}  // namespace melon::nn
