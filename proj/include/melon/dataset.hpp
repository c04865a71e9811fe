#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "melon/ingest.hpp"
#include "melon/signal.hpp"

namespace melon {

// One preprocessed, labelled 12-hour window.
struct Example {
  std::string patient_id;
  double window_start = 0.0;
  MobilityClass label = MobilityClass::CompletelyImmobile;
  SpectroImage image;
  FeatureSequence features;
  std::optional<std::array<double, 3>> activity;  // activity counts, empty without valid samples
  std::size_t valid_samples = 0;
};

// Requires a labelled window.
Example make_example(const LabeledWindow& window, std::size_t image_size = 224);

// Windows of every recording in `recordings` (CSV files), labelled from
// `labels` and masked with `offs`. Unlabelled windows are skipped.
struct PreprocessStats {
  std::size_t recordings = 0;
  std::size_t windows = 0;
  std::size_t unlabeled = 0;
};
std::vector<Example> preprocess_recordings(const std::filesystem::path& recordings,
                                           const std::filesystem::path& labels,
                                           const std::filesystem::path& offs, std::size_t image_size = 224,
                                           PreprocessStats* stats = nullptr);

// dir/index.csv plus images/<key>.png and features/<key>.csv per example.
void write_examples(const std::filesystem::path& dir, const std::vector<Example>& examples);
std::vector<Example> load_examples(const std::filesystem::path& dir);

// File-name key for an example: <patient>_<window start in whole seconds>.
std::string example_key(const Example& e);

}  // namespace melon
