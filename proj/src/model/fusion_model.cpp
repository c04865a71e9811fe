#include "melon/fusion_model.hpp"

#include <cmath>
#include <random>

namespace melon {

using ad::Tensor;

void FusionConfig::validate(std::size_t embed) const {
  if (tokens == 0 || token_dim == 0 || heads == 0 || classifier_hidden == 0) {
    throw ConfigError("fusion: all sizes must be positive");
  }
  if (tokens * token_dim != embed) {
    throw ConfigError("fusion: tokens x token_dim = " + std::to_string(tokens * token_dim) +
                      " must equal the embedding width " + std::to_string(embed));
  }
  if (token_dim % heads != 0) {
    throw ConfigError("fusion: token_dim " + std::to_string(token_dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

std::string_view branches_name(Branches b) {
  switch (b) {
    case Branches::fused: return "fused";
    case Branches::image_only: return "image_only";
    case Branches::sequence_only: return "sequence_only";
  }
  return "fused";
}

Branches branches_from_string(std::string_view s) {
  if (s == "fused") return Branches::fused;
  if (s == "image_only") return Branches::image_only;
  if (s == "sequence_only") return Branches::sequence_only;
  throw ConfigError("unknown branch mode '" + std::string(s) + "' (fused, image_only, sequence_only)");
}

void MelonConfig::validate() const {
  sequence.validate();
  image.validate();
  if (image.projection != sequence.embed) {
    throw ConfigError("image projection width " + std::to_string(image.projection) +
                      " differs from sequence embedding width " + std::to_string(sequence.embed));
  }
  fusion.validate(sequence.embed);
}

template <typename T>
FusionHead<T>::FusionHead(const FusionConfig& cfg, std::size_t embed, std::uint64_t seed)
    : cfg_(cfg), embed_(embed) {
  cfg_.validate(embed);
  std::mt19937_64 rng(seed);
  q = nn::Linear<T>(cfg.token_dim, cfg.token_dim, false, rng);
  k = nn::Linear<T>(cfg.token_dim, cfg.token_dim, false, rng);
  v = nn::Linear<T>(cfg.token_dim, cfg.token_dim, false, rng);
  o = nn::Linear<T>(cfg.token_dim, cfg.token_dim, false, rng);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    Classifier h;
    h.hidden = nn::Linear<T>(embed, cfg.classifier_hidden, true, rng);
    h.out = nn::Linear<T>(cfg.classifier_hidden, 1, true, rng);
    heads.push_back(std::move(h));
  }
}

template <typename T>
Tensor<T> FusionHead<T>::fuse(const Tensor<T>& i_embed, const Tensor<T>& a_embed) const {
  if (i_embed.numel() != embed_ || a_embed.numel() != embed_) {
    throw ShapeError("fuse: embeddings must have " + std::to_string(embed_) + " entries, got " +
                     ad::shape_str(i_embed.shape()) + " and " + ad::shape_str(a_embed.shape()));
  }
  const std::size_t n = cfg_.tokens, d = cfg_.token_dim, h = cfg_.heads, dh = d / h;
  const Tensor<T> tokens = ad::reshape(ad::add(ad::reshape(i_embed, {embed_}), ad::reshape(a_embed, {embed_})),
                                       {n, d});
  const auto split_heads = [&](const Tensor<T>& x) {
    return ad::permute(ad::reshape(x, {n, h, dh}), {1, 0, 2});
  };
  const Tensor<T> qh = split_heads(q(tokens)), kh = split_heads(k(tokens)), vh = split_heads(v(tokens));
  Tensor<T> scores = ad::scale(ad::matmul(qh, kh, false, true), static_cast<T>(1.0 / std::sqrt(double(dh))));
  Tensor<T> ctx = ad::matmul(ad::softmax(scores), vh);
  ctx = ad::reshape(ad::permute(ctx, {1, 0, 2}), {n, d});
  return ad::reshape(ad::add(tokens, o(ctx)), {embed_});
}

template <typename T>
Tensor<T> FusionHead<T>::logits(const Tensor<T>& f_attn) const {
  std::vector<Tensor<T>> parts;
  for (const auto& head : heads) parts.push_back(head.out(ad::relu(head.hidden(f_attn))));
  return ad::concat(parts, 0);
}

template <typename T>
void FusionHead<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
  q.collect(prefix + ".attn.q", out);
  k.collect(prefix + ".attn.k", out);
  v.collect(prefix + ".attn.v", out);
  o.collect(prefix + ".attn.o", out);
  for (std::size_t c = 0; c < heads.size(); ++c) {
    const std::string p = prefix + ".heads." + std::to_string(c);
    heads[c].hidden.collect(p + ".hidden", out);
    heads[c].out.collect(p + ".out", out);
  }
}

template <typename T>
MelonModel<T>::MelonModel(const MelonConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  image = ImageEncoder<T>(cfg_.image, nn::mix_seed(seed, 1));
  sequence = MoeEncoder<T>(cfg_.sequence, nn::mix_seed(seed, 2));
  fusion = FusionHead<T>(cfg_.fusion, cfg_.sequence.embed, nn::mix_seed(seed, 3));
}

template <typename T>
MelonOutput<T> MelonModel<T>::forward(const Tensor<T>& img, const SequenceInput<T>& seq,
                                      const nn::ForwardContext& ctx) const {
  const std::size_t embed = cfg_.sequence.embed;
  Tensor<T> i_embed = Tensor<T>::zeros({embed});
  Tensor<T> a_embed = Tensor<T>::zeros({embed});
  Tensor<T> aux = Tensor<T>::scalar(T(0));
  if (cfg_.branches != Branches::sequence_only) i_embed = image(img, ctx);
  if (cfg_.branches != Branches::image_only) {
    auto enc = sequence.encode(seq);
    a_embed = enc.embedding;
    aux = enc.aux;
  }
  return {fusion.logits(fusion.fuse(i_embed, a_embed)), aux};
}

template <typename T>
nn::ParamList<T> MelonModel<T>::parameters() const {
  nn::ParamList<T> out = image.parameters();
  for (auto& p : sequence.parameters()) out.push_back(std::move(p));
  fusion.collect("fusion", out);
  return out;
}

namespace {

template <typename T>
std::vector<T> one_hot(MobilityClass label) {
  std::vector<T> y(kNumClasses, T(0));
  y[class_index(label)] = T(1);
  return y;
}

template <typename T>
Tensor<T> weighted(Tensor<T> loss, MobilityClass label, std::span<const double> class_weights) {
  if (class_weights.empty()) return loss;
  if (class_weights.size() != kNumClasses) {
    throw ConfigError("class weights need " + std::to_string(kNumClasses) + " entries");
  }
  return ad::scale(loss, static_cast<T>(class_weights[class_index(label)]));
}

}  // namespace

template <typename T>
Tensor<T> supervised_loss(const Tensor<T>& probs, MobilityClass label, std::span<const double> class_weights) {
  if (probs.numel() != kNumClasses) throw ShapeError("supervised_loss: expected 4 probabilities");
  const auto y = one_hot<T>(label);
  return weighted(ad::binary_cross_entropy(probs, std::span<const T>(y), {}, ad::Reduction::sum), label,
                  class_weights);
}

template <typename T>
Tensor<T> supervised_loss_from_logits(const Tensor<T>& logits, MobilityClass label,
                                      std::span<const double> class_weights) {
  if (logits.numel() != kNumClasses) throw ShapeError("supervised_loss: expected 4 scores");
  const auto y = one_hot<T>(label);
  return weighted(ad::binary_cross_entropy_with_logits(logits, std::span<const T>(y), {}, ad::Reduction::sum),
                  label, class_weights);
}

FeatureNorm FeatureNorm::fit(std::span<const FeatureSequence* const> sequences) {
  FeatureNorm norm;
  std::array<double, kFeatureCols> sum{}, sq{};
  double n = 0.0;
  for (const auto* seq : sequences) {
    for (std::size_t r = 0; r < kFeatureRows; ++r) {
      if (!seq->mask[r]) continue;
      for (std::size_t c = 0; c < kFeatureCols; ++c) {
        sum[c] += seq->at(r, c);
        sq[c] += seq->at(r, c) * seq->at(r, c);
      }
      n += 1.0;
    }
  }
  if (n == 0.0) return norm;
  for (std::size_t c = 0; c < kFeatureCols; ++c) {
    norm.mean[c] = sum[c] / n;
    const double var = std::max(0.0, sq[c] / n - norm.mean[c] * norm.mean[c]);
    norm.scale[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

template <typename T>
Tensor<T> image_tensor(const SpectroImage& img) {
  std::vector<T> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.pixels[i]) / T(255);
  return Tensor<T>::from({3, img.height, img.width}, std::move(v));
}

template <typename T>
SequenceInput<T> sequence_input(const FeatureSequence& seq, const FeatureNorm& norm) {
  std::vector<T> v(kFeatureRows * kFeatureCols, T(0));
  for (std::size_t r = 0; r < kFeatureRows; ++r) {
    if (!seq.mask[r]) continue;
    for (std::size_t c = 0; c < kFeatureCols; ++c) {
      v[r * kFeatureCols + c] = static_cast<T>((seq.at(r, c) - norm.mean[c]) / norm.scale[c]);
    }
  }
  return {Tensor<T>::from({kFeatureRows, kFeatureCols}, std::move(v)), seq.mask};
}

std::array<double, kNumClasses> melon_forward(const MelonModel<float>& model, const SpectroImage& img,
                                              const FeatureSequence& seq, const FeatureNorm& norm) {
  ad::NoGrad no_grad;
  const auto probs = model.probabilities(image_tensor<float>(img), sequence_input<float>(seq, norm));
  std::array<double, kNumClasses> out{};
  for (std::size_t c = 0; c < kNumClasses; ++c) out[c] = probs.data()[c];
  return out;
}

template class FusionHead<float>;
template class FusionHead<double>;
template class MelonModel<float>;
template class MelonModel<double>;

#define MELON_INSTANTIATE_LOSSES(T)                                                                    \
  template Tensor<T> supervised_loss<T>(const Tensor<T>&, MobilityClass, std::span<const double>);      \
  template Tensor<T> supervised_loss_from_logits<T>(const Tensor<T>&, MobilityClass,                     \
                                                    std::span<const double>);                           \
  template Tensor<T> image_tensor<T>(const SpectroImage&);                                              \
  template SequenceInput<T> sequence_input<T>(const FeatureSequence&, const FeatureNorm&);
MELON_INSTANTIATE_LOSSES(float)
MELON_INSTANTIATE_LOSSES(double)
#undef MELON_INSTANTIATE_LOSSES

}  // namespace melon
