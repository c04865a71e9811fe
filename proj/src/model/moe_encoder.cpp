#include "melon/moe_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace melon {

namespace ops = melon::ad;
using ad::Tensor;

void MoeConfig::validate() const {
  if (input_features == 0 || hidden == 0 || embed == 0) {
    throw ConfigError("moe: feature, hidden and embed sizes must be positive");
  }
  if (heads == 0 || hidden % heads != 0) {
    throw ConfigError("moe: hidden size " + std::to_string(hidden) +
                      " is not divisible by heads " + std::to_string(heads));
  }
  if ((hidden / heads) % 2 != 0) throw ConfigError("moe: per-head size must be even for rotary");
  if (experts == 0 || top_k < 1 || top_k > experts) {
    throw ConfigError("moe: top_k must be in [1, experts]");
  }
  if (expansion == 0) throw ConfigError("moe: expansion must be positive");
  if (aux_weight < 0.0) throw ConfigError("moe: aux_weight must be non-negative");
}

std::vector<std::uint8_t> causal_key_mask(std::span<const std::uint8_t> valid) {
  const std::size_t len = valid.size();
  std::vector<std::uint8_t> allowed(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j <= i; ++j) allowed[i * len + j] = valid[j] ? 1 : 0;
  return allowed;
}

// ---- MoeFfn ---------------------------------------------------------------

template <typename T>
MoeFfn<T>::MoeFfn(const MoeConfig& cfg, std::mt19937_64& rng) : top_k(cfg.top_k) {
  const std::size_t d = cfg.hidden, wide = cfg.hidden * cfg.expansion;
  router = nn::Linear<T>(d, cfg.experts, false, rng);
  shared_gate = nn::Linear<T>(d, 1, false, rng);
  for (std::size_t i = 0; i < cfg.experts; ++i) {
    experts.push_back({nn::Linear<T>(d, wide, false, rng), nn::Linear<T>(wide, d, false, rng)});
  }
  shared_expert = {nn::Linear<T>(d, wide, false, rng), nn::Linear<T>(wide, d, false, rng)};
}

template <typename T>
Routing<T> MoeFfn<T>::route(const Tensor<T>& h) const {
  const std::size_t n = h.size(0), e = experts.size();
  Tensor<T> logits = router(h);
  Routing<T> r;
  r.probs = ops::softmax(logits);
  r.selected.assign(n * e, 0);
  std::vector<std::size_t> order(e);
  const auto lv = logits.data();
  for (std::size_t t = 0; t < n; ++t) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return lv[t * e + a] > lv[t * e + b]; });
    for (std::size_t j = 0; j < top_k; ++j) r.selected[t * e + order[j]] = 1;
  }
  r.alpha = ops::masked_softmax(logits, r.selected);
  r.shared_gate = ops::sigmoid(shared_gate(h));
  return r;
}

template <typename T>
Tensor<T> MoeFfn<T>::expert(std::size_t i, const Tensor<T>& h) const {
  const auto& ex = experts.at(i);
  return ex.down(ops::silu(ex.up(h)));
}

template <typename T>
Tensor<T> MoeFfn<T>::shared(const Tensor<T>& h) const {
  return shared_expert.down(ops::silu(shared_expert.up(h)));
}

template <typename T>
MoeOutput<T> MoeFfn<T>::operator()(const Tensor<T>& h, std::span<const std::uint8_t> valid) const {
  const std::size_t n = h.size(0), e = experts.size();
  if (valid.size() != n) throw ShapeError("moe: validity mask length does not match tokens");
  Routing<T> r = route(h);

  Tensor<T> out = ops::mul(r.shared_gate, shared(h));
  for (std::size_t i = 0; i < e; ++i) {
    std::vector<std::size_t> rows;
    for (std::size_t t = 0; t < n; ++t)
      if (r.selected[t * e + i]) rows.push_back(t);
    if (rows.empty()) continue;
    Tensor<T> weight = ops::gather_rows(ops::slice(r.alpha, 1, i, i + 1), rows);
    // Row-stable products: which tokens share an expert must not perturb any of them.
    const auto& ex = experts[i];
    Tensor<T> hidden = ops::silu(ops::matmul_rows(ops::gather_rows(h, rows), ex.up.weight));
    Tensor<T> y = ops::mul(ops::matmul_rows(hidden, ex.down.weight), weight);
    out = ops::add(out, ops::scatter_rows(y, rows, n));
  }

  // Load balance: E * sum_i f_i * P_i over valid tokens, f_i = routed fraction.
  std::size_t n_valid = 0;
  for (auto v : valid) n_valid += v ? 1 : 0;
  MoeOutput<T> result{out, Tensor<T>::scalar(T(0))};
  if (n_valid == 0) return result;
  std::vector<T> frac(e, T(0));
  std::vector<T> row_w(n, T(0));
  for (std::size_t t = 0; t < n; ++t) {
    if (!valid[t]) continue;
    row_w[t] = T(1) / static_cast<T>(n_valid);
    for (std::size_t i = 0; i < e; ++i)
      if (r.selected[t * e + i]) frac[i] += T(1);
  }
  for (auto& f : frac) f /= static_cast<T>(n_valid * top_k);
  Tensor<T> mean_prob =
      ops::sum(ops::mul(r.probs, Tensor<T>::from({n, 1}, std::move(row_w))), 0);
  result.aux = ops::scale(ops::sum(ops::mul(mean_prob, Tensor<T>::from({e}, std::move(frac)))),
                          static_cast<T>(e));
  return result;
}

template <typename T>
void MoeFfn<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
  router.collect(prefix + ".router", out);
  shared_gate.collect(prefix + ".shared_gate", out);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    experts[i].up.collect(prefix + ".experts." + std::to_string(i) + ".up", out);
    experts[i].down.collect(prefix + ".experts." + std::to_string(i) + ".down", out);
  }
  shared_expert.up.collect(prefix + ".shared.up", out);
  shared_expert.down.collect(prefix + ".shared.down", out);
}

// ---- RotaryAttention --------------------------------------------------------

template <typename T>
RotaryAttention<T>::RotaryAttention(const MoeConfig& cfg, std::mt19937_64& rng)
    : heads(cfg.heads), base(cfg.rope_base) {
  const std::size_t d = cfg.hidden;
  q = nn::Linear<T>(d, d, false, rng);
  k = nn::Linear<T>(d, d, false, rng);
  v = nn::Linear<T>(d, d, false, rng);
  o = nn::Linear<T>(d, d, false, rng);
}

template <typename T>
Tensor<T> RotaryAttention<T>::operator()(const Tensor<T>& x,
                                         std::span<const std::uint8_t> allowed) const {
  const std::size_t len = x.size(0), d = x.size(1), dh = d / heads;
  auto split = [&](const Tensor<T>& t) {
    return ops::permute(ops::reshape(t, {len, heads, dh}), {1, 0, 2});
  };
  Tensor<T> qh = ops::scale(ops::rotary(split(q(x)), base),
                            static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor<T> kh = ops::rotary(split(k(x)), base);
  Tensor<T> vh = split(v(x));
  Tensor<T> ctx = ops::reshape(ops::permute(ops::causal_attention(qh, kh, vh, allowed), {1, 0, 2}), {len, d});
  return o(ctx);
}

template <typename T>
void RotaryAttention<T>::collect(const std::string& prefix, nn::ParamList<T>& out) const {
  q.collect(prefix + ".q", out);
  k.collect(prefix + ".k", out);
  v.collect(prefix + ".v", out);
  o.collect(prefix + ".o", out);
}

// ---- MoeEncoder -------------------------------------------------------------

template <typename T>
MoeEncoder<T>::MoeEncoder(const MoeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.hidden;
  in_proj = nn::Linear<T>(cfg.input_features, d, false, rng);
  swiglu_w = nn::Linear<T>(d, d, false, rng);
  swiglu_v = nn::Linear<T>(d, d, false, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    DecoderLayer<T> layer;
    layer.norm1 = nn::constant_param<T>({d}, T(1));
    layer.attn = RotaryAttention<T>(cfg, rng);
    layer.norm2 = nn::constant_param<T>({d}, T(1));
    layer.moe = MoeFfn<T>(cfg, rng);
    layers.push_back(std::move(layer));
  }
  final_norm = nn::constant_param<T>({d}, T(1));
  out_proj = nn::Linear<T>(d, cfg.embed, true, rng);
  ar_head = nn::Linear<T>(d, cfg.input_features, true, rng);
}

template <typename T>
Tensor<T> MoeEncoder<T>::swiglu_embed(const Tensor<T>& a) const {
  if (a.rank() != 2 || a.size(1) != cfg_.input_features) {
    throw ShapeError("swiglu_embed expects [L, " + std::to_string(cfg_.input_features) +
                     "] features, got " + ad::shape_str(a.shape()));
  }
  Tensor<T> p = in_proj(a);
  return ops::mul(ops::silu(swiglu_w(p)), swiglu_v(p));
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> MoeEncoder<T>::hidden_states(const SequenceInput<T>& seq) const {
  if (seq.valid.size() != seq.values.size(0)) {
    throw ShapeError("sequence mask length does not match " + ad::shape_str(seq.values.shape()));
  }
  const auto allowed = causal_key_mask(seq.valid);
  Tensor<T> h = swiglu_embed(seq.values);
  Tensor<T> aux = Tensor<T>::scalar(T(0));
  for (const auto& layer : layers) {
    h = ops::add(h, layer.attn(ops::rms_norm(h, layer.norm1, cfg_.norm_eps), allowed));
    MoeOutput<T> m = layer.moe(ops::rms_norm(h, layer.norm2, cfg_.norm_eps), seq.valid);
    h = ops::add(h, m.out);
    aux = ops::add(aux, m.aux);
  }
  if (!layers.empty()) aux = ops::scale(aux, T(1) / static_cast<T>(layers.size()));
  return {ops::rms_norm(h, final_norm, cfg_.norm_eps), aux};
}

template <typename T>
EncodeResult<T> MoeEncoder<T>::encode(const SequenceInput<T>& seq) const {
  const std::size_t len = seq.values.size(0);
  std::size_t n_valid = 0;
  for (auto v : seq.valid) n_valid += v ? 1 : 0;
  if (n_valid == 0) {
    return {Tensor<T>::zeros({cfg_.embed}), Tensor<T>::scalar(T(0)), true};
  }
  auto [h, aux] = hidden_states(seq);
  std::vector<T> w(len, T(0));
  for (std::size_t t = 0; t < len; ++t)
    if (seq.valid[t]) w[t] = T(1) / static_cast<T>(n_valid);
  Tensor<T> pooled = ops::sum(ops::mul(h, Tensor<T>::from({len, 1}, std::move(w))), 0);
  return {out_proj(pooled), aux, false};
}

template <typename T>
Tensor<T> MoeEncoder<T>::ar_predictions(const SequenceInput<T>& seq) const {
  const std::size_t len = seq.values.size(0);
  if (len < 2) throw ShapeError("autoregressive prediction needs at least two rows");
  Tensor<T> h = hidden_states(seq).first;
  return ar_head(ops::slice(h, 0, 0, len - 1));
}

template <typename T>
ArTerms<T> MoeEncoder<T>::ar_terms(const SequenceInput<T>& seq) const {
  const std::size_t len = seq.values.size(0), f = cfg_.input_features;
  std::size_t targets = 0;
  for (std::size_t t = 1; t < len; ++t) targets += seq.valid[t] ? 1 : 0;
  if (targets == 0) return {Tensor<T>::scalar(T(0)), 0, Tensor<T>::scalar(T(0))};

  auto [h, aux] = hidden_states(seq);
  Tensor<T> pred = ar_head(ops::slice(h, 0, 0, len - 1));
  const auto xv = seq.values.data();
  std::vector<T> target(xv.begin() + static_cast<std::ptrdiff_t>(f), xv.end());
  std::vector<T> row_mask(len - 1);
  for (std::size_t t = 0; t + 1 < len; ++t) row_mask[t] = seq.valid[t + 1] ? T(1) : T(0);
  Tensor<T> diff = ops::mul(ops::sub(pred, Tensor<T>::from({len - 1, f}, std::move(target))),
                            Tensor<T>::from({len - 1, 1}, std::move(row_mask)));
  return {ops::sum(ops::mul(diff, diff)), targets, aux};
}

template <typename T>
nn::ParamList<T> MoeEncoder<T>::encoder_parameters() const {
  nn::ParamList<T> out;
  in_proj.collect("moe.in_proj", out);
  swiglu_w.collect("moe.swiglu_w", out);
  swiglu_v.collect("moe.swiglu_v", out);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "moe.layers." + std::to_string(l);
    out.push_back({p + ".norm1", layers[l].norm1});
    layers[l].attn.collect(p + ".attn", out);
    out.push_back({p + ".norm2", layers[l].norm2});
    layers[l].moe.collect(p + ".moe", out);
  }
  out.push_back({"moe.final_norm", final_norm});
  out_proj.collect("moe.out_proj", out);
  return out;
}

template <typename T>
nn::ParamList<T> MoeEncoder<T>::parameters() const {
  auto out = encoder_parameters();
  ar_head.collect("moe.ar_head", out);
  return out;
}

template <typename T>
Tensor<T> ar_pretrain_loss(const MoeEncoder<T>& enc, std::span<const SequenceInput<T>> batch) {
  if (batch.empty()) throw ConfigError("ar_pretrain_loss: empty batch");
  std::vector<ArTerms<T>> terms;
  std::size_t targets = 0;
  for (const auto& s : batch) {
    terms.push_back(enc.ar_terms(s));
    targets += terms.back().targets;
  }
  if (targets == 0) return Tensor<T>::scalar(T(0));
  const T norm = T(1) / static_cast<T>(targets * enc.config().input_features);
  const T aux_w = static_cast<T>(enc.config().aux_weight / static_cast<double>(batch.size()));
  Tensor<T> loss = Tensor<T>::scalar(T(0));
  for (const auto& t : terms) {
    loss = ops::add(loss, ops::add(ops::scale(t.sse, norm), ops::scale(t.aux, aux_w)));
  }
  return loss;
}

template class MoeFfn<float>;
template class MoeFfn<double>;
template class RotaryAttention<float>;
template class RotaryAttention<double>;
template class MoeEncoder<float>;
template class MoeEncoder<double>;
template Tensor<float> ar_pretrain_loss(const MoeEncoder<float>&,
                                        std::span<const SequenceInput<float>>);
template Tensor<double> ar_pretrain_loss(const MoeEncoder<double>&,
                                         std::span<const SequenceInput<double>>);

}  // namespace melon
