#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "melon/nn.hpp"

namespace melon {

struct ImageStage {
  std::size_t width = 16;
  std::size_t blocks = 2;
};

struct ImageEncoderConfig {
  std::size_t in_channels = 3;
  std::size_t height = 224;
  std::size_t width = 224;
  // Each stage opens with a stride-2 block.
  std::vector<ImageStage> stages{{16, 2}, {32, 2}, {64, 2}};
  std::size_t projection = 512;
  double dropout = 0.3;
  std::size_t norm_groups = 4;

  void validate() const;
};

// Spatial (height, width) after each stage for an input of the given size.
std::vector<std::pair<std::size_t, std::size_t>> receptive_shape_check(
    const ImageEncoderConfig& cfg, std::size_t height, std::size_t width);
inline std::vector<std::pair<std::size_t, std::size_t>> receptive_shape_check(
    const ImageEncoderConfig& cfg) {
  return receptive_shape_check(cfg, cfg.height, cfg.width);
}

// conv3x3-norm-ReLU-conv3x3-norm plus identity or 1x1 projection shortcut, then ReLU.
template <typename T>
struct ResidualBlock {
  ad::Tensor<T> conv1, norm1_gain, norm1_bias;
  ad::Tensor<T> conv2, norm2_gain, norm2_bias;
  ad::Tensor<T> shortcut;  // [out, in, 1, 1] or undefined for identity
  std::size_t stride = 1;

  ad::Tensor<T> operator()(const ad::Tensor<T>& x, std::size_t groups) const;
  ad::Tensor<T> shortcut_path(const ad::Tensor<T>& x) const;
  void collect(const std::string& prefix, nn::ParamList<T>& out) const;
};

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ImageEncoderConfig& cfg, std::uint64_t seed);

  const ImageEncoderConfig& config() const { return cfg_; }

  // x [C, H, W] with pixel values already scaled to [0, 1].
  ad::Tensor<T> operator()(const ad::Tensor<T>& x, const nn::ForwardContext& ctx = {}) const;
  // Stem and residual stages only: [C_last, h, w].
  ad::Tensor<T> features(const ad::Tensor<T>& x) const;
  // Projection head applied to pooled trunk features.
  ad::Tensor<T> project(const ad::Tensor<T>& pooled, const nn::ForwardContext& ctx = {}) const;
  ad::Tensor<T> stem_path(const ad::Tensor<T>& x) const;

  nn::ParamList<T> parameters() const;

  ad::Tensor<T> stem_conv, stem_gain, stem_bias;
  std::vector<std::vector<ResidualBlock<T>>> stages;
  nn::Linear<T> head;

 private:
  ImageEncoderConfig cfg_;
};

extern template struct ResidualBlock<float>;
extern template struct ResidualBlock<double>;
extern template class ImageEncoder<float>;
extern template class ImageEncoder<double>;

}  // namespace melon
