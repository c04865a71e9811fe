#include "melon/image_encoder.hpp"

#include <cmath>
#include <random>

namespace melon {

using ad::Tensor;

void ImageEncoderConfig::validate() const {
  if (in_channels == 0) throw ConfigError("image encoder: in_channels must be positive");
  if (stages.empty()) throw ConfigError("image encoder: at least one stage is required");
  if (norm_groups == 0) throw ConfigError("image encoder: norm_groups must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.width == 0 || s.blocks == 0) {
      throw ConfigError("image encoder: stage " + std::to_string(i) +
                        " needs positive width and block count");
    }
    if (s.width % norm_groups != 0) {
      throw ConfigError("image encoder: stage width " + std::to_string(s.width) +
                        " is not divisible by norm_groups " + std::to_string(norm_groups));
    }
  }
  if (projection == 0) throw ConfigError("image encoder: projection width must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("image encoder: dropout must lie in [0, 1)");
  }
}

std::vector<std::pair<std::size_t, std::size_t>> receptive_shape_check(
    const ImageEncoderConfig& cfg, std::size_t height, std::size_t width) {
  cfg.validate();
  if (height == 0 || width == 0) {
    throw ConfigError("image encoder: input " + std::to_string(height) + "x" +
                      std::to_string(width) + " has zero spatial size");
  }
  // 3x3 kernel, padding 1, stride 2: out = (n - 1) / 2 + 1.
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    height = (height - 1) / 2 + 1;
    width = (width - 1) / 2 + 1;
    out.emplace_back(height, width);
  }
  return out;
}

namespace {

template <typename T>
Tensor<T> conv_param(std::size_t out, std::size_t in, std::size_t k, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  return nn::uniform_param<T>({out, in, k, k}, bound, rng);
}

}  // namespace

template <typename T>
Tensor<T> ResidualBlock<T>::shortcut_path(const Tensor<T>& x) const {
  if (!shortcut.defined()) return x;
  return ad::conv2d(x, shortcut, Tensor<T>(), stride, 0);
}

template <typename T>
Tensor<T> ResidualBlock<T>::operator()(const Tensor<T>& x, std::size_t groups) const {
  Tensor<T> h = ad::conv2d(x, conv1, Tensor<T>(), stride, 1);
  h = ad::relu(ad::group_norm(h, groups, norm1_gain, norm1_bias));
  h = ad::conv2d(h, conv2, Tensor<T>(), 1, 1);
  h = ad::group_norm(h, groups, norm2_gain, norm2_bias);
  return ad::relu(ad::add(h, shortcut_path(x)));
}

template <typename T>
void ResidualBlock<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
  out.push_back({prefix + ".conv1", conv1});
  out.push_back({prefix + ".norm1.gain", norm1_gain});
  out.push_back({prefix + ".norm1.bias", norm1_bias});
  out.push_back({prefix + ".conv2", conv2});
  out.push_back({prefix + ".norm2.gain", norm2_gain});
  out.push_back({prefix + ".norm2.bias", norm2_bias});
  if (shortcut.defined()) out.push_back({prefix + ".shortcut", shortcut});
}

template <typename T>
ImageEncoder<T>::ImageEncoder(const ImageEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t w0 = cfg_.stages.front().width;
  stem_conv = conv_param<T>(w0, cfg_.in_channels, 3, rng);
  stem_gain = nn::constant_param<T>({w0}, T(1));
  stem_bias = nn::constant_param<T>({w0}, T(0));

  std::size_t in = w0;
  for (const auto& st : cfg_.stages) {
    std::vector<ResidualBlock<T>> blocks;
    for (std::size_t b = 0; b < st.blocks; ++b) {
      ResidualBlock<T> blk;
      blk.stride = b == 0 ? 2 : 1;
      blk.conv1 = conv_param<T>(st.width, in, 3, rng);
      blk.norm1_gain = nn::constant_param<T>({st.width}, T(1));
      blk.norm1_bias = nn::constant_param<T>({st.width}, T(0));
      blk.conv2 = conv_param<T>(st.width, st.width, 3, rng);
      blk.norm2_gain = nn::constant_param<T>({st.width}, T(1));
      blk.norm2_bias = nn::constant_param<T>({st.width}, T(0));
      if (blk.stride != 1 || in != st.width) blk.shortcut = conv_param<T>(st.width, in, 1, rng);
      blocks.push_back(std::move(blk));
      in = st.width;
    }
    stages.push_back(std::move(blocks));
  }
  head = nn::Linear<T>(in, cfg_.projection, true, rng);
}

template <typename T>
Tensor<T> ImageEncoder<T>::stem_path(const Tensor<T>& x) const {
  if (x.rank() != 3 || x.size(0) != cfg_.in_channels) {
    throw ShapeError("image encoder expects [" + std::to_string(cfg_.in_channels) +
                     ", H, W] input, got " + ad::shape_str(x.shape()));
  }
  Tensor<T> h = ad::conv2d(x, stem_conv, Tensor<T>(), 1, 1);
  return ad::relu(ad::group_norm(h, cfg_.norm_groups, stem_gain, stem_bias));
}

template <typename T>
Tensor<T> ImageEncoder<T>::features(const Tensor<T>& x) const {
  Tensor<T> h = stem_path(x);
  for (const auto& st : stages) {
    for (const auto& blk : st) h = blk(h, cfg_.norm_groups);
  }
  return h;
}

template <typename T>
Tensor<T> ImageEncoder<T>::project(const Tensor<T>& pooled, const nn::ForwardContext& ctx) const {
  Tensor<T> z = ad::relu(head(pooled));
  if (ctx.training && cfg_.dropout > 0.0) z = ad::dropout(z, cfg_.dropout, ctx.next(0x1D));
  return z;
}

template <typename T>
Tensor<T> ImageEncoder<T>::operator()(const Tensor<T>& x, const nn::ForwardContext& ctx) const {
  return project(ad::global_avg_pool(features(x)), ctx);
}

template <typename T>
nn::ParamList<T> ImageEncoder<T>::parameters() const {
  nn::ParamList<T> out;
  out.push_back({"image.stem.conv", stem_conv});
  out.push_back({"image.stem.norm.gain", stem_gain});
  out.push_back({"image.stem.norm.bias", stem_bias});
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].collect("image.stages." + std::to_string(s) + "." + std::to_string(b), out);
    }
  }
  head.collect("image.head", out);
  return out;
}

template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;

}  // namespace melon
