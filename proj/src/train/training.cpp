#include "melon/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "melon/ad/optim.hpp"
#include "melon/config.hpp"

namespace melon {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::string shape_text(const ad::Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

bool has_prefix(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

void check_disjoint(const std::vector<const Example*>& a, const std::vector<const Example*>& b) {
  std::set<std::string> ids;
  for (const auto* e : a) ids.insert(e->patient_id);
  for (const auto* e : b)
    if (ids.count(e->patient_id)) throw LeakageError(e->patient_id);
}

FeatureNorm fit_norm(const std::vector<const Example*>& examples) {
  std::vector<const FeatureSequence*> seqs;
  for (const auto* e : examples) seqs.push_back(&e->features);
  return FeatureNorm::fit(seqs);
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw Error(std::string("non-finite ") + what + " during training");
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  if (patience < 1) throw ConfigError("train.patience must be at least 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be at least 1");
  if (!(lr > 0.0) || !(pretrain_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (aux_weight < 0.0) throw ConfigError("train.aux_weight must be non-negative");
}

// ---- checkpoint ---------------------------------------------------------------

std::map<std::string, TensorBlob> capture(const nn::ParamList<float>& params) {
  std::map<std::string, TensorBlob> out;
  for (const auto& p : params) {
    const auto d = p.tensor.data();
    out[p.name] = TensorBlob{p.tensor.shape(), std::vector<float>(d.begin(), d.end())};
  }
  return out;
}

std::size_t restore(const nn::ParamList<float>& params, const std::map<std::string, TensorBlob>& tensors,
                    const std::string& prefix) {
  std::size_t n = 0;
  std::set<std::string> model_names;
  for (const auto& p : params) {
    if (!has_prefix(p.name, prefix)) continue;
    model_names.insert(p.name);
    const auto it = tensors.find(p.name);
    if (it == tensors.end()) throw CheckpointError("checkpoint has no tensor '" + p.name + "'");
    if (it->second.shape != p.tensor.shape()) {
      throw CheckpointError("tensor '" + p.name + "' has shape " + shape_text(it->second.shape) +
                            " in the checkpoint but the model expects " + shape_text(p.tensor.shape()));
    }
    ad::Tensor<float> handle = p.tensor;
    auto dst = handle.mutable_data();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    ++n;
  }
  for (const auto& [name, blob] : tensors) {
    if (has_prefix(name, prefix) && !model_names.count(name)) {
      throw CheckpointError("checkpoint tensor '" + name + "' does not exist in the model");
    }
  }
  return n;
}

std::string parameter_digest(const nn::ParamList<float>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t len) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
  };
  for (const auto& p : params) {
    mix(p.name.data(), p.name.size());
    const auto d = p.tensor.data();
    mix(d.data(), d.size() * sizeof(float));
  }
  return hex64(h);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  Json manifest = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, blob] : c.tensors) {
    if (ad::shape_numel(blob.shape) != blob.values.size()) {
      throw CheckpointError("tensor '" + name + "' holds " + std::to_string(blob.values.size()) +
                            " values for shape " + shape_text(blob.shape));
    }
    manifest.push_back({{"name", name}, {"shape", blob.shape}, {"offset", offset}});
    offset += blob.values.size() * sizeof(float);
  }
  const Json meta{{"kind", c.kind},
                  {"model", to_json(c.model)},
                  {"train", to_json(c.train)},
                  {"norm", to_json(c.norm)},
                  {"epoch", c.epoch},
                  {"best_val_auroc", c.best_val_auroc},
                  {"rng_digest", c.rng_digest},
                  {"tensors", manifest},
                  {"blob_bytes", offset}};
  const std::string text = meta.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  const std::uint32_t version = kCheckpointVersion, reserved = 0;
  const std::uint64_t len = text.size();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&reserved), 4);
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, blob] : c.tensors) {
    out.write(reinterpret_cast<const char*>(blob.values.data()),
              static_cast<std::streamsize>(blob.values.size() * sizeof(float)));
  }
  if (!out) throw CheckpointError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = 24;
  if (bytes.size() < header) throw CheckpointError(path.string() + ": truncated checkpoint header");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint (bad magic)");
  }
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&len, bytes.data() + 16, 8);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version) +
                          " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  if (len > bytes.size() - header) throw CheckpointError(path.string() + ": truncated metadata");

  Checkpoint c;
  std::size_t blob_start = header + len;
  try {
    const Json meta = Json::parse(bytes.begin() + header, bytes.begin() + static_cast<std::ptrdiff_t>(blob_start));
    c.kind = meta.at("kind").get<std::string>();
    from_json(meta.at("model"), c.model);
    from_json(meta.at("train"), c.train);
    from_json(meta.at("norm"), c.norm);
    c.epoch = meta.at("epoch").get<std::size_t>();
    c.best_val_auroc = meta.at("best_val_auroc").get<double>();
    c.rng_digest = meta.at("rng_digest").get<std::string>();
    const auto blob_bytes = meta.at("blob_bytes").get<std::uint64_t>();
    if (bytes.size() - blob_start != blob_bytes) {
      throw CheckpointError(path.string() + ": truncated tensor data (expected " + std::to_string(blob_bytes) +
                            " bytes, found " + std::to_string(bytes.size() - blob_start) + ")");
    }
    for (const auto& t : meta.at("tensors")) {
      TensorBlob blob;
      const auto name = t.at("name").get<std::string>();
      blob.shape = t.at("shape").get<ad::Shape>();
      const auto offset = t.at("offset").get<std::uint64_t>();
      const std::size_t count = ad::shape_numel(blob.shape);
      if (offset + count * sizeof(float) > blob_bytes) {
        throw CheckpointError(path.string() + ": tensor '" + name + "' extends past the end of the file");
      }
      blob.values.resize(count);
      std::memcpy(blob.values.data(), bytes.data() + blob_start + offset, count * sizeof(float));
      c.tensors.emplace(name, std::move(blob));
    }
  } catch (const Json::exception& e) {
    throw CheckpointError(path.string() + ": malformed metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": malformed metadata: " + e.what());
  }
  return c;
}

MelonModel<float> model_from_checkpoint(const Checkpoint& ckpt) {
  MelonModel<float> m(ckpt.model, ckpt.train.seed);
  restore(m.parameters(), ckpt.tensors);
  return m;
}

// ---- training -------------------------------------------------------------------

std::array<double, kNumClasses> class_weights(const std::vector<const Example*>& train) {
  std::array<double, kNumClasses> counts{}, w{};
  for (const auto* e : train) counts[class_index(e->label)] += 1.0;
  const double present = static_cast<double>(std::count_if(counts.begin(), counts.end(), [](double c) { return c > 0; }));
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    w[k] = counts[k] > 0 ? static_cast<double>(train.size()) / (present * counts[k]) : 1.0;
  }
  return w;
}

bool EarlyStopping::update(std::size_t epoch, double metric) {
  if (best_epoch == 0 || metric > best) {
    best = metric;
    best_epoch = epoch;
    return true;
  }
  return false;
}

std::size_t batch_count(std::size_t samples, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  return (samples + batch_size - 1) / batch_size;
}

std::vector<const Example*> select_split(const std::vector<Example>& examples, const SplitAssignment& split,
                                         Split which) {
  std::vector<const Example*> out;
  for (const auto& e : examples)
    if (split.contains(e.patient_id) && split.of(e.patient_id) == which) out.push_back(&e);
  return out;
}

PretrainResult pretrain(const std::vector<const Example*>& examples, const SplitAssignment& split,
                        const MelonConfig& model, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  model.validate();
  if (examples.empty()) throw DataError("pretraining needs at least one window");
  for (const auto* e : examples) {
    if (!split.contains(e->patient_id) || split.of(e->patient_id) != Split::train) throw LeakageError(e->patient_id);
  }

  PretrainResult res;
  const FeatureNorm norm = fit_norm(examples);
  MelonModel<float> m(model, cfg.seed);
  const MoeEncoder<float>& enc = m.sequence;
  std::vector<SequenceInput<float>> inputs;
  inputs.reserve(examples.size());
  for (const auto* e : examples) inputs.push_back(sequence_input<float>(e->features, norm));

  const auto params = enc.parameters();
  std::vector<ad::Tensor<float>> leaves;
  for (const auto& p : params) leaves.push_back(p.tensor);
  ad::Adam<float> opt(leaves, {cfg.pretrain_lr});

  auto run_epoch = [&](const std::vector<std::size_t>& order, bool learn) {
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      std::size_t targets = 0;
      for (std::size_t i = b; i < end; ++i)
        for (std::size_t t = 1; t < kFeatureRows; ++t) targets += inputs[order[i]].valid[t] ? 1 : 0;
      const double norm_w = targets ? 1.0 / static_cast<double>(targets * kFeatureCols) : 0.0;
      const double aux_w = model.sequence.aux_weight / static_cast<double>(end - b);
      if (learn) opt.zero_grad();
      double batch_loss = 0.0;
      for (std::size_t i = b; i < end; ++i) {
        if (learn && hooks.on_sample) hooks.on_sample(*examples[order[i]]);
        std::optional<ad::NoGrad> ng;
        if (!learn) ng.emplace();
        const auto terms = enc.ar_terms(inputs[order[i]]);
        if (terms.targets == 0) continue;
        auto loss = ad::add(ad::scale(terms.sse, static_cast<float>(norm_w)), ad::scale(terms.aux, static_cast<float>(aux_w)));
        batch_loss += loss.item();
        if (learn) loss.backward();
      }
      require_finite(batch_loss, "pretraining loss");
      if (learn) opt.step();
      total += batch_loss;
      ++batches;
    }
    return total / static_cast<double>(batches);
  };

  std::vector<std::size_t> identity(examples.size());
  std::iota(identity.begin(), identity.end(), 0);
  res.losses.push_back(run_epoch(identity, false));
  for (std::size_t e = 1; e <= cfg.pretrain_epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    res.losses.push_back(run_epoch(shuffled(examples.size(), nn::mix_seed(cfg.seed, 0x9E7000 + e)), true));
    if (hooks.on_epoch) {
      hooks.on_epoch({e, res.losses.back(), 0.0,
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    }
  }

  Checkpoint& c = res.checkpoint;
  c.kind = "pretrain";
  c.model = model;
  c.train = cfg;
  c.norm = norm;
  c.epoch = cfg.pretrain_epochs;
  c.rng_digest = hex64(nn::mix_seed(cfg.seed, opt.steps()));
  c.tensors = capture(params);
  return res;
}

std::vector<ScoredWindow> score_examples(const MelonModel<float>& model, const FeatureNorm& norm,
                                         const std::vector<const Example*>& examples) {
  std::vector<ScoredWindow> out;
  out.reserve(examples.size());
  for (const auto* e : examples) {
    out.push_back({e->patient_id, e->window_start, e->label, melon_forward(model, e->image, e->features, norm)});
  }
  return out;
}

TrainResult train(const std::vector<const Example*>& train_set, const std::vector<const Example*>& val_set,
                  const MelonConfig& model, const TrainConfig& cfg, const Checkpoint* warm, const TrainHooks& hooks) {
  cfg.validate();
  model.validate();
  if (train_set.empty()) throw DataError("training split is empty");
  if (val_set.empty()) throw DataError("validation split is empty");
  check_disjoint(train_set, val_set);

  TrainResult res;
  const FeatureNorm norm = fit_norm(train_set);
  MelonModel<float> m(model, cfg.seed);
  const auto params = m.parameters();
  if (warm) {
    if (restore(params, warm->tensors, "moe.") == 0) throw CheckpointError("warm-start checkpoint has no encoder tensors");
  }
  res.init_digest = parameter_digest(params);

  std::vector<ad::Tensor<float>> leaves;
  for (const auto& p : params) {
    if (has_prefix(p.name, "moe.ar_head")) continue;
    if (cfg.freeze_image && has_prefix(p.name, "image.")) continue;
    leaves.push_back(p.tensor);
  }
  ad::Adam<float> opt(leaves, {cfg.lr});

  std::vector<ad::Tensor<float>> images;
  std::vector<SequenceInput<float>> seqs;
  for (const auto* e : train_set) {
    images.push_back(image_tensor<float>(e->image));
    seqs.push_back(sequence_input<float>(e->features, norm));
  }
  const auto weights = cfg.class_weighting ? class_weights(train_set) : std::array<double, kNumClasses>{1, 1, 1, 1};

  EarlyStopping stop{cfg.patience};
  std::map<std::string, TensorBlob> best = capture(params);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto order = shuffled(train_set.size(), nn::mix_seed(cfg.seed, 0xE90C00 + epoch));
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg.batch_size);
      const float inv = 1.0f / static_cast<float>(end - b);
      opt.zero_grad();
      for (std::size_t i = b; i < end; ++i) {
        const std::size_t idx = order[i];
        if (hooks.on_sample) hooks.on_sample(*train_set[idx]);
        const nn::ForwardContext ctx{true, nn::mix_seed(nn::mix_seed(cfg.seed, epoch), idx)};
        const auto out = m.forward(images[idx], seqs[idx], ctx);
        auto loss = ad::add(supervised_loss_from_logits(out.logits, train_set[idx]->label, weights),
                            ad::scale(out.aux, static_cast<float>(cfg.aux_weight)));
        total += loss.item();
        ad::scale(loss, inv).backward();
      }
      require_finite(total, "training loss");
      opt.step();
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = total / static_cast<double>(train_set.size());
    std::optional<double> metric = hooks.metric_override ? hooks.metric_override(epoch) : std::nullopt;
    if (!metric) {
      metric = macro_auroc(score_examples(m, norm, val_set));
      if (!metric) throw DataError("validation split needs windows from at least two classes");
    }
    log.val_auroc = *metric;
    if (stop.update(epoch, *metric)) best = capture(params);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back(log);
    res.epochs_run = epoch;
    if (hooks.on_epoch) hooks.on_epoch(log);
    if (stop.should_stop(epoch)) break;
  }

  res.best_epoch = stop.best_epoch;
  Checkpoint& c = res.checkpoint;
  c.kind = "model";
  c.model = model;
  c.train = cfg;
  c.norm = norm;
  c.epoch = stop.best_epoch;
  c.best_val_auroc = stop.best;
  c.rng_digest = hex64(nn::mix_seed(cfg.seed, opt.steps()));
  c.tensors = std::move(best);
  return res;
}

void append_epoch_log(const std::filesystem::path& path, const EpochLog& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::app);
  if (!out) throw DataError("cannot write " + path.string());
  out << Json{{"epoch", log.epoch}, {"train_loss", log.train_loss}, {"val_auroc", log.val_auroc}, {"seconds", log.seconds}}
             .dump()
      << '\n';
}

}  // namespace melon
