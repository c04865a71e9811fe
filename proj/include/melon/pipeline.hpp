#pragma once

#include <iosfwd>
#include <vector>

#include "melon/config.hpp"

namespace melon {

// Examples of every synthetic patient, preprocessed in memory.
std::vector<Example> synth_examples(const SynthConfig& cfg, std::size_t image_size = 224);

struct VariantResult {
  Branches branches = Branches::fused;
  EvalReport report;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double seconds = 0.0;
};

struct BenchmarkResult {
  std::vector<VariantResult> variants;  // fused, image_only, sequence_only
  EvalReport baseline;
  std::size_t train_windows = 0, val_windows = 0, test_windows = 0;
  double seconds = 0.0;  // whole pipeline, generation included

  const VariantResult& variant(Branches b) const;
};

// Synthetic cohort -> preprocessing -> patient split -> pretraining ->
// fine-tuning of the fused model and both ablations -> test evaluation,
// plus the activity-counts baseline. Progress lines go to `log` when given.
BenchmarkResult run_benchmark(const RunConfig& cfg, std::ostream* log = nullptr);

}  // namespace melon
