#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "melon/eval_stats.hpp"
#include "melon/fusion_model.hpp"
#include "melon/synth.hpp"
#include "melon/training.hpp"

namespace melon {

using Json = nlohmann::json;

// Serialization of module configs. Readers start from the current values,
// overwrite the keys present and reject unknown keys with ConfigError.
Json to_json(const MoeConfig& c);
Json to_json(const ImageEncoderConfig& c);
Json to_json(const FusionConfig& c);
Json to_json(const MelonConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SynthConfig& c);
Json to_json(const SplitRatios& c);
Json to_json(const BootstrapOptions& c);
Json to_json(const FeatureNorm& n);

void from_json(const Json& j, MoeConfig& c, const std::string& where = "model.sequence");
void from_json(const Json& j, ImageEncoderConfig& c, const std::string& where = "model.image");
void from_json(const Json& j, FusionConfig& c, const std::string& where = "model.fusion");
void from_json(const Json& j, MelonConfig& c, const std::string& where = "model");
void from_json(const Json& j, TrainConfig& c, const std::string& where = "train");
void from_json(const Json& j, SynthConfig& c, const std::string& where = "synth");
void from_json(const Json& j, SplitRatios& c, const std::string& where = "split");
void from_json(const Json& j, BootstrapOptions& c, const std::string& where = "eval");
void from_json(const Json& j, FeatureNorm& n, const std::string& where = "norm");

struct RunPaths {
  std::string data_dir = "data";        // synthetic cohort root
  std::string recordings;               // defaults to <data_dir>/recordings
  std::string labels;                   // defaults to <data_dir>/labels.csv
  std::string off_intervals;            // defaults to <data_dir>/off_intervals.csv
  std::string examples = "examples_out";
  std::string split = "split.json";
  std::string run_dir = "runs/default";
};

struct RunConfig {
  SynthConfig synth;
  SplitRatios split;
  std::uint64_t split_seed = 0;
  std::size_t image_size = 224;
  MelonConfig model;
  TrainConfig train;
  BootstrapOptions eval;
  RunPaths paths;

  void validate() const;
};

Json to_json(const RunConfig& c);
void from_json(const Json& j, RunConfig& c, const std::string& where = "");

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace melon
