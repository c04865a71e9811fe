#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "melon/nn.hpp"

namespace melon {

struct MoeConfig {
  std::size_t input_features = 5;
  std::size_t hidden = 128;    // D
  std::size_t experts = 4;     // specialised experts, plus one shared
  std::size_t top_k = 1;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t expansion = 4;   // expert width = expansion * D
  std::size_t embed = 512;     // D-hat
  double aux_weight = 0.01;    // load-balance loss weight
  double rope_base = 10000.0;
  double norm_eps = 1e-6;

  // Throws ConfigError on inconsistent values.
  void validate() const;
};

// A feature sequence as the encoder sees it: [L, F] values plus per-row validity.
template <typename T>
struct SequenceInput {
  ad::Tensor<T> values;
  std::vector<std::uint8_t> valid;
};

// allowed[i * L + j] = 1 iff j <= i and token j is valid.
std::vector<std::uint8_t> causal_key_mask(std::span<const std::uint8_t> valid);

template <typename T>
struct Routing {
  ad::Tensor<T> probs;        // [N, E] full router softmax
  ad::Tensor<T> alpha;        // [N, E] renormalised over the selected experts, 0 elsewhere
  ad::Tensor<T> shared_gate;  // [N, 1] sigmoid(W_s h)
  std::vector<std::uint8_t> selected;  // [N, E] selection mask
};

template <typename T>
struct MoeOutput {
  ad::Tensor<T> out;  // [N, D]
  ad::Tensor<T> aux;  // scalar load-balance penalty over valid tokens
};

// Sparse mixture-of-experts feed-forward layer with an always-on shared expert.
template <typename T>
class MoeFfn {
 public:
  struct Expert {
    nn::Linear<T> up;
    nn::Linear<T> down;
  };

  MoeFfn() = default;
  MoeFfn(const MoeConfig& cfg, std::mt19937_64& rng);

  Routing<T> route(const ad::Tensor<T>& h) const;
  MoeOutput<T> operator()(const ad::Tensor<T>& h, std::span<const std::uint8_t> valid) const;
  // Expert i (or the shared expert) applied densely to all rows.
  ad::Tensor<T> expert(std::size_t i, const ad::Tensor<T>& h) const;
  ad::Tensor<T> shared(const ad::Tensor<T>& h) const;

  void collect(const std::string& prefix, nn::ParamList<T>& out) const;

  nn::Linear<T> router;       // W_g [E, D]
  nn::Linear<T> shared_gate;  // W_s [1, D]
  std::vector<Expert> experts;
  Expert shared_expert;
  std::size_t top_k = 1;
};

// Causal multi-head self-attention with rotary position encoding.
template <typename T>
class RotaryAttention {
 public:
  RotaryAttention() = default;
  RotaryAttention(const MoeConfig& cfg, std::mt19937_64& rng);

  // x [L, D]; allowed is the [L, L] key mask from causal_key_mask.
  ad::Tensor<T> operator()(const ad::Tensor<T>& x, std::span<const std::uint8_t> allowed) const;
  void collect(const std::string& prefix, nn::ParamList<T>& out) const;

  nn::Linear<T> q, k, v, o;
  std::size_t heads = 1;
  double base = 10000.0;
};

template <typename T>
struct DecoderLayer {
  ad::Tensor<T> norm1;
  RotaryAttention<T> attn;
  ad::Tensor<T> norm2;
  MoeFfn<T> moe;
};

template <typename T>
struct EncodeResult {
  ad::Tensor<T> embedding;  // [D-hat]
  ad::Tensor<T> aux;        // mean load-balance penalty over layers
  bool empty = false;       // no valid tokens; embedding is zero
};

// Per-sample pieces of the autoregressive objective, so a batch can be
// normalised by its total count of valid targets.
template <typename T>
struct ArTerms {
  ad::Tensor<T> sse;          // summed squared error over valid target rows
  std::size_t targets = 0;    // valid target rows
  ad::Tensor<T> aux;
};

template <typename T>
class MoeEncoder {
 public:
  MoeEncoder() = default;
  MoeEncoder(const MoeConfig& cfg, std::uint64_t seed);

  const MoeConfig& config() const { return cfg_; }

  // a [L, F] -> [L, D]: Swish(W f_proj(a)) * (V f_proj(a)).
  ad::Tensor<T> swiglu_embed(const ad::Tensor<T>& a) const;
  // Decoder stack + final norm. Returns [L, D] and the mean aux penalty.
  std::pair<ad::Tensor<T>, ad::Tensor<T>> hidden_states(const SequenceInput<T>& seq) const;
  EncodeResult<T> encode(const SequenceInput<T>& seq) const;
  // Row t predicts feature row t + 1: [L - 1, F].
  ad::Tensor<T> ar_predictions(const SequenceInput<T>& seq) const;
  ArTerms<T> ar_terms(const SequenceInput<T>& seq) const;

  nn::ParamList<T> parameters() const;
  // Parameters used by classification (excludes the regression head).
  nn::ParamList<T> encoder_parameters() const;

  nn::Linear<T> in_proj;   // f_proj
  nn::Linear<T> swiglu_w;  // W
  nn::Linear<T> swiglu_v;  // V
  std::vector<DecoderLayer<T>> layers;
  ad::Tensor<T> final_norm;
  nn::Linear<T> out_proj;  // D -> D-hat
  nn::Linear<T> ar_head;   // D -> F

 private:
  MoeConfig cfg_;
};

// Batch autoregressive loss: sum(sse) / (F * sum(targets)) + aux_weight * mean(aux).
// An all-masked batch gives a constant zero.
template <typename T>
ad::Tensor<T> ar_pretrain_loss(const MoeEncoder<T>& enc, std::span<const SequenceInput<T>> batch);

extern template class MoeFfn<float>;
extern template class MoeFfn<double>;
extern template class RotaryAttention<float>;
extern template class RotaryAttention<double>;
extern template class MoeEncoder<float>;
extern template class MoeEncoder<double>;

}  // namespace melon
