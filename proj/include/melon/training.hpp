#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "melon/dataset.hpp"
#include "melon/eval_stats.hpp"
#include "melon/fusion_model.hpp"

namespace melon {

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t patience = 7;
  std::size_t max_epochs = 100;
  double lr = 1e-4;
  double pretrain_lr = 1e-3;
  std::size_t pretrain_epochs = 3;
  std::uint64_t seed = 0;
  bool class_weighting = true;
  double aux_weight = 0.01;  // lambda on the load-balance penalty during fine-tuning
  bool freeze_image = false;

  void validate() const;
};

// Tensor values keyed by parameter name, stored as 32-bit floats.
struct TensorBlob {
  ad::Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::string kind = "model";  // "model" or "pretrain"
  MelonConfig model;
  TrainConfig train;
  FeatureNorm norm;
  std::size_t epoch = 0;  // 1-based best epoch; 0 before training
  double best_val_auroc = 0.0;
  std::string rng_digest;
  std::map<std::string, TensorBlob> tensors;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'L', 'N', '1', '\0', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout (little-endian): 8-byte magic "MELN1\0\0\0", uint32 version,
// uint32 reserved (0), uint64 metadata length, UTF-8 JSON metadata, then the
// float32 tensor blob. The metadata manifest lists name, shape and byte offset.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::map<std::string, TensorBlob> capture(const nn::ParamList<float>& params);
// Copies every tensor whose name starts with `prefix` into the matching
// parameter. Missing names or shape mismatches raise CheckpointError naming
// the tensor. Returns the number of tensors restored.
std::size_t restore(const nn::ParamList<float>& params, const std::map<std::string, TensorBlob>& tensors,
                    const std::string& prefix = "");

// Digest of the parameter values, for telling weight sets apart.
std::string parameter_digest(const nn::ParamList<float>& params);

// Model with the checkpoint weights loaded.
MelonModel<float> model_from_checkpoint(const Checkpoint& ckpt);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_auroc = 0.0;
  double seconds = 0.0;
};

struct TrainHooks {
  // Called for every window that reaches a gradient step.
  std::function<void(const Example&)> on_sample;
  // Replaces the validation metric of an epoch (1-based) when set.
  std::function<std::optional<double>(std::size_t epoch)> metric_override;
  // Receives each epoch record as it is produced.
  std::function<void(const EpochLog&)> on_epoch;
};

// N / (K * n_c) over the classes present; 1 for absent classes.
std::array<double, kNumClasses> class_weights(const std::vector<const Example*>& train);

// Index of the best epoch under strict improvement, and whether training stops
// after `epoch` (1-based) given the metrics so far.
struct EarlyStopping {
  std::size_t patience = 7;
  std::size_t best_epoch = 0;
  double best = -1.0;

  // Returns true when the new metric is a strict improvement.
  bool update(std::size_t epoch, double metric);
  bool should_stop(std::size_t epoch) const { return best_epoch > 0 && epoch >= best_epoch + patience; }
};

std::size_t batch_count(std::size_t samples, std::size_t batch_size);

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<double> losses;  // [0] before training, then one per epoch
};

// Autoregressive pretraining of the sequence encoder. Every example must
// belong to a train-split patient, else LeakageError.
PretrainResult pretrain(const std::vector<const Example*>& examples, const SplitAssignment& split,
                        const MelonConfig& model, const TrainConfig& cfg, const TrainHooks& hooks = {});

struct TrainResult {
  Checkpoint checkpoint;  // best epoch
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  std::string init_digest;  // parameters before the first step
};

// Supervised fine-tuning with early stopping on validation macro AUROC.
// `warm` supplies pretrained "moe." weights.
TrainResult train(const std::vector<const Example*>& train_set, const std::vector<const Example*>& val_set,
                  const MelonConfig& model, const TrainConfig& cfg, const Checkpoint* warm = nullptr,
                  const TrainHooks& hooks = {});

// Eval-mode scores of every example.
std::vector<ScoredWindow> score_examples(const MelonModel<float>& model, const FeatureNorm& norm,
                                         const std::vector<const Example*>& examples);

// Examples whose patient is in the given split.
std::vector<const Example*> select_split(const std::vector<Example>& examples, const SplitAssignment& split,
                                         Split which);

void append_epoch_log(const std::filesystem::path& path, const EpochLog& log);

}  // namespace melon
