#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "melon/image_encoder.hpp"
#include "melon/moe_encoder.hpp"
#include "melon/signal.hpp"
#include "melon/types.hpp"

namespace melon {

struct FusionConfig {
  std::size_t tokens = 8;
  std::size_t token_dim = 64;
  std::size_t heads = 4;
  std::size_t classifier_hidden = 128;

  void validate(std::size_t embed) const;
};

// Which embeddings feed the fusion layer; an ablated branch contributes zeros.
enum class Branches { fused, image_only, sequence_only };

std::string_view branches_name(Branches b);
Branches branches_from_string(std::string_view s);

struct MelonConfig {
  MoeConfig sequence;
  ImageEncoderConfig image;
  FusionConfig fusion;
  Branches branches = Branches::fused;

  void validate() const;
};

template <typename T>
class FusionHead {
 public:
  struct Classifier {
    nn::Linear<T> hidden;
    nn::Linear<T> out;
  };

  FusionHead() = default;
  FusionHead(const FusionConfig& cfg, std::size_t embed, std::uint64_t seed);

  // Self-attention over the token grid of i_embed + a_embed, plus residual.
  ad::Tensor<T> fuse(const ad::Tensor<T>& i_embed, const ad::Tensor<T>& a_embed) const;
  // Pre-sigmoid scores of the four one-vs-rest heads: [4].
  ad::Tensor<T> logits(const ad::Tensor<T>& f_attn) const;
  ad::Tensor<T> classify(const ad::Tensor<T>& f_attn) const { return ad::sigmoid(logits(f_attn)); }

  void collect(const std::string& prefix, nn::ParamList<T>& out) const;

  nn::Linear<T> q, k, v, o;
  std::vector<Classifier> heads;

 private:
  FusionConfig cfg_;
  std::size_t embed_ = 0;
};

template <typename T>
struct MelonOutput {
  ad::Tensor<T> logits;  // [4]
  ad::Tensor<T> aux;     // load-balance penalty of the sequence branch (0 when ablated)
};

template <typename T>
class MelonModel {
 public:
  MelonModel() = default;
  MelonModel(const MelonConfig& cfg, std::uint64_t seed);

  const MelonConfig& config() const { return cfg_; }

  // image [3, H, W] in [0, 1]; seq holds standardized features.
  MelonOutput<T> forward(const ad::Tensor<T>& image, const SequenceInput<T>& seq,
                         const nn::ForwardContext& ctx = {}) const;
  ad::Tensor<T> probabilities(const ad::Tensor<T>& image, const SequenceInput<T>& seq,
                              const nn::ForwardContext& ctx = {}) const {
    return ad::sigmoid(forward(image, seq, ctx).logits);
  }

  nn::ParamList<T> parameters() const;

  ImageEncoder<T> image;
  MoeEncoder<T> sequence;
  FusionHead<T> fusion;

 private:
  MelonConfig cfg_;
};

// Sum over the four heads of binary cross-entropy against the one-hot label,
// scaled by class_weights[label] when weights are given.
template <typename T>
ad::Tensor<T> supervised_loss(const ad::Tensor<T>& probs, MobilityClass label,
                              std::span<const double> class_weights = {});
// The same loss computed from pre-sigmoid scores.
template <typename T>
ad::Tensor<T> supervised_loss_from_logits(const ad::Tensor<T>& logits, MobilityClass label,
                                          std::span<const double> class_weights = {});

// Per-feature standardization fitted on valid training rows.
struct FeatureNorm {
  std::array<double, kFeatureCols> mean{};
  std::array<double, kFeatureCols> scale{1.0, 1.0, 1.0, 1.0, 1.0};

  static FeatureNorm fit(std::span<const FeatureSequence* const> sequences);
};

template <typename T>
ad::Tensor<T> image_tensor(const SpectroImage& img);
// Masked rows stay zero after standardization.
template <typename T>
SequenceInput<T> sequence_input(const FeatureSequence& seq, const FeatureNorm& norm = {});

// Eval-mode class probabilities for one window.
std::array<double, kNumClasses> melon_forward(const MelonModel<float>& model, const SpectroImage& img,
                                              const FeatureSequence& seq, const FeatureNorm& norm = {});

extern template class FusionHead<float>;
extern template class FusionHead<double>;
extern template class MelonModel<float>;
extern template class MelonModel<double>;

}  // namespace melon
