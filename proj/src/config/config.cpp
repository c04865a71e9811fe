#include "melon/config.hpp"

#include <fstream>
#include <initializer_list>
#include <set>

namespace melon {

namespace {

// Reads keys of one JSON object into fields, rejecting unknown keys.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j.is_object()) throw ConfigError(label() + " must be a JSON object");
  }

  template <typename T>
  Fields& operator()(const char* key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return *this;
    try {
      if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
        const auto& v = j_.at(key);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
          throw ConfigError(label(key) + " must be a non-negative integer");
        }
      }
      out = j_.at(key).get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(label(key) + ": " + e.what());
    }
    return *this;
  }

  template <typename F>
  Fields& nested(const char* key, F&& read) {
    known_.insert(key);
    if (j_.contains(key)) read(j_.at(key), child(key));
    return *this;
  }

  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!known_.count(k)) throw ConfigError("unknown key '" + child(k.c_str()) + "'");
    }
  }

  std::string child(const char* key) const { return where_.empty() ? key : where_ + "." + key; }

 private:
  std::string label(const char* key = nullptr) const {
    if (key) return "config key '" + child(key) + "'";
    return where_.empty() ? "config" : "config section '" + where_ + "'";
  }

  const Json& j_;
  std::string where_;
  std::set<std::string> known_;
};

std::string read_string(const Json& j, const std::string& where) {
  if (!j.is_string()) throw ConfigError("config key '" + where + "' must be a string");
  return j.get<std::string>();
}

}  // namespace

Json to_json(const MoeConfig& c) {
  return {{"input_features", c.input_features}, {"hidden", c.hidden},         {"experts", c.experts},
          {"top_k", c.top_k},                   {"layers", c.layers},         {"heads", c.heads},
          {"expansion", c.expansion},           {"embed", c.embed},           {"aux_weight", c.aux_weight},
          {"rope_base", c.rope_base},           {"norm_eps", c.norm_eps}};
}

void from_json(const Json& j, MoeConfig& c, const std::string& where) {
  Fields f(j, where);
  f("input_features", c.input_features)("hidden", c.hidden)("experts", c.experts)("top_k", c.top_k)(
      "layers", c.layers)("heads", c.heads)("expansion", c.expansion)("embed", c.embed)("aux_weight", c.aux_weight)(
      "rope_base", c.rope_base)("norm_eps", c.norm_eps);
  f.done();
}

Json to_json(const ImageEncoderConfig& c) {
  Json stages = Json::array();
  for (const auto& s : c.stages) stages.push_back({{"width", s.width}, {"blocks", s.blocks}});
  return {{"in_channels", c.in_channels}, {"height", c.height},         {"width", c.width},
          {"stages", stages},             {"projection", c.projection}, {"dropout", c.dropout},
          {"norm_groups", c.norm_groups}};
}

void from_json(const Json& j, ImageEncoderConfig& c, const std::string& where) {
  Fields f(j, where);
  f("in_channels", c.in_channels)("height", c.height)("width", c.width)("projection", c.projection)(
      "dropout", c.dropout)("norm_groups", c.norm_groups);
  f.nested("stages", [&](const Json& arr, const std::string& w) {
    if (!arr.is_array()) throw ConfigError("config key '" + w + "' must be an array");
    c.stages.clear();
    for (std::size_t i = 0; i < arr.size(); ++i) {
      ImageStage s;
      Fields sf(arr[i], w + "[" + std::to_string(i) + "]");
      sf("width", s.width)("blocks", s.blocks);
      sf.done();
      c.stages.push_back(s);
    }
  });
  f.done();
}

Json to_json(const FusionConfig& c) {
  return {{"tokens", c.tokens}, {"token_dim", c.token_dim}, {"heads", c.heads}, {"classifier_hidden", c.classifier_hidden}};
}

void from_json(const Json& j, FusionConfig& c, const std::string& where) {
  Fields f(j, where);
  f("tokens", c.tokens)("token_dim", c.token_dim)("heads", c.heads)("classifier_hidden", c.classifier_hidden);
  f.done();
}

Json to_json(const MelonConfig& c) {
  return {{"sequence", to_json(c.sequence)},
          {"image", to_json(c.image)},
          {"fusion", to_json(c.fusion)},
          {"branches", branches_name(c.branches)}};
}

void from_json(const Json& j, MelonConfig& c, const std::string& where) {
  Fields f(j, where);
  f.nested("sequence", [&](const Json& v, const std::string& w) { from_json(v, c.sequence, w); });
  f.nested("image", [&](const Json& v, const std::string& w) { from_json(v, c.image, w); });
  f.nested("fusion", [&](const Json& v, const std::string& w) { from_json(v, c.fusion, w); });
  f.nested("branches", [&](const Json& v, const std::string& w) { c.branches = branches_from_string(read_string(v, w)); });
  f.done();
}

Json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"patience", c.patience},
          {"max_epochs", c.max_epochs},
          {"lr", c.lr},
          {"pretrain_lr", c.pretrain_lr},
          {"pretrain_epochs", c.pretrain_epochs},
          {"seed", c.seed},
          {"class_weighting", c.class_weighting},
          {"aux_weight", c.aux_weight},
          {"freeze_image", c.freeze_image}};
}

void from_json(const Json& j, TrainConfig& c, const std::string& where) {
  Fields f(j, where);
  f("batch_size", c.batch_size)("patience", c.patience)("max_epochs", c.max_epochs)("lr", c.lr)(
      "pretrain_lr", c.pretrain_lr)("pretrain_epochs", c.pretrain_epochs)("seed", c.seed)(
      "class_weighting", c.class_weighting)("aux_weight", c.aux_weight)("freeze_image", c.freeze_image);
  f.done();
}

Json to_json(const SynthConfig& c) {
  return {{"patients", c.patients},
          {"min_windows", c.min_windows},
          {"max_windows", c.max_windows},
          {"seed", c.seed},
          {"burst_rate", c.burst_rate},
          {"burst_amplitude", c.burst_amplitude},
          {"burst_min_s", c.burst_min_s},
          {"burst_max_s", c.burst_max_s},
          {"drift_period_s", c.drift_period_s},
          {"noise_sd", c.noise_sd},
          {"off_probability", c.off_probability},
          {"patient_spread", c.patient_spread},
          {"sway_amplitude", c.sway_amplitude},
          {"sway_period_s", c.sway_period_s},
          {"start_time", c.start_time},
          {"site", site_name(c.site)}};
}

void from_json(const Json& j, SynthConfig& c, const std::string& where) {
  Fields f(j, where);
  f("patients", c.patients)("min_windows", c.min_windows)("max_windows", c.max_windows)("seed", c.seed)(
      "burst_rate", c.burst_rate)("burst_amplitude", c.burst_amplitude)("burst_min_s", c.burst_min_s)(
      "burst_max_s", c.burst_max_s)("drift_period_s", c.drift_period_s)("noise_sd", c.noise_sd)(
      "off_probability", c.off_probability)("patient_spread", c.patient_spread)(
      "sway_amplitude", c.sway_amplitude)("sway_period_s", c.sway_period_s)("start_time", c.start_time);
  f.nested("site", [&](const Json& v, const std::string& w) {
    try {
      c.site = site_from_string(read_string(v, w));
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
  });
  f.done();
}

Json to_json(const SplitRatios& c) { return {{"dev", c.dev}, {"train", c.train}}; }

void from_json(const Json& j, SplitRatios& c, const std::string& where) {
  Fields f(j, where);
  f("dev", c.dev)("train", c.train);
  f.done();
}

Json to_json(const BootstrapOptions& c) { return {{"resamples", c.resamples}, {"seed", c.seed}, {"level", c.level}}; }

void from_json(const Json& j, BootstrapOptions& c, const std::string& where) {
  Fields f(j, where);
  f("resamples", c.resamples)("seed", c.seed)("level", c.level);
  f.done();
}

Json to_json(const FeatureNorm& n) { return {{"mean", n.mean}, {"scale", n.scale}}; }

void from_json(const Json& j, FeatureNorm& n, const std::string& where) {
  Fields f(j, where);
  f("mean", n.mean)("scale", n.scale);
  f.done();
}

void RunConfig::validate() const {
  synth.validate();
  model.validate();
  train.validate();
  if (!(split.dev > 0.0 && split.dev < 1.0 && split.train > 0.0 && split.train < 1.0)) {
    throw ConfigError("split fractions must lie strictly between 0 and 1");
  }
  if (image_size < 8) throw ConfigError("image_size must be at least 8");
  if (model.image.height != image_size || model.image.width != image_size) {
    throw ConfigError("model.image height/width must equal image_size");
  }
  if (eval.resamples == 0) throw ConfigError("eval.resamples must be positive");
  if (!(eval.level > 0.0 && eval.level < 1.0)) throw ConfigError("eval.level must lie in (0, 1)");
}

Json to_json(const RunConfig& c) {
  return {{"synth", to_json(c.synth)},
          {"split", to_json(c.split)},
          {"split_seed", c.split_seed},
          {"image_size", c.image_size},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"eval", to_json(c.eval)},
          {"paths",
           {{"data_dir", c.paths.data_dir},
            {"recordings", c.paths.recordings},
            {"labels", c.paths.labels},
            {"off_intervals", c.paths.off_intervals},
            {"examples", c.paths.examples},
            {"split", c.paths.split},
            {"run_dir", c.paths.run_dir}}}};
}

void from_json(const Json& j, RunConfig& c, const std::string& where) {
  Fields f(j, where);
  f("split_seed", c.split_seed)("image_size", c.image_size);
  f.nested("synth", [&](const Json& v, const std::string& w) { from_json(v, c.synth, w); });
  f.nested("split", [&](const Json& v, const std::string& w) { from_json(v, c.split, w); });
  f.nested("model", [&](const Json& v, const std::string& w) { from_json(v, c.model, w); });
  f.nested("train", [&](const Json& v, const std::string& w) { from_json(v, c.train, w); });
  f.nested("eval", [&](const Json& v, const std::string& w) { from_json(v, c.eval, w); });
  f.nested("paths", [&](const Json& v, const std::string& w) {
    Fields p(v, w);
    p("data_dir", c.paths.data_dir)("recordings", c.paths.recordings)("labels", c.paths.labels)(
        "off_intervals", c.paths.off_intervals)("examples", c.paths.examples)("split", c.paths.split)(
        "run_dir", c.paths.run_dir);
    p.done();
  });
  f.done();
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  RunConfig c;
  from_json(j, c);
  return c;
}

void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

}  // namespace melon
