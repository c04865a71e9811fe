#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "melon/config.hpp"
#include "melon/training.hpp"

namespace fs = std::filesystem;
using namespace melon;

namespace {

MelonConfig tiny_model() {
  MelonConfig c;
  c.image.height = c.image.width = 16;
  c.image.stages = {{4, 1}};
  c.image.projection = 16;
  c.sequence.hidden = 8;
  c.sequence.heads = 2;
  c.sequence.experts = 2;
  c.sequence.layers = 1;
  c.sequence.expansion = 2;
  c.sequence.embed = 16;
  c.fusion.tokens = 4;
  c.fusion.token_dim = 4;
  c.fusion.heads = 2;
  c.fusion.classifier_hidden = 8;
  return c;
}

TrainConfig fast_train() {
  TrainConfig t;
  t.batch_size = 4;
  t.lr = 3e-3;
  t.pretrain_lr = 1e-2;
  t.max_epochs = 3;
  t.seed = 1;
  return t;
}

// Smooth features whose level follows the class, plus a class-tinted image.
std::vector<Example> toy_examples(std::size_t patients, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<Example> out;
  for (std::size_t p = 0; p < patients; ++p) {
    Example e;
    e.patient_id = "T" + std::to_string(p);
    e.label = static_cast<MobilityClass>(1 + p % 4);
    const double level = static_cast<double>(e.label);
    const double phase = nd(rng);
    for (std::size_t r = 0; r < kFeatureRows; ++r) {
      e.features.mask[r] = r % 97 != 5;
      for (std::size_t c = 0; c < kFeatureCols; ++c) {
        e.features.values[r * kFeatureCols + c] =
            level * (1.0 + 0.1 * double(c)) + std::sin(0.01 * double(r) + phase + double(c)) + 0.1 * nd(rng);
      }
    }
    e.image = SpectroImage{16, 16, std::vector<std::uint8_t>(3 * 16 * 16)};
    for (auto& px : e.image.pixels) px = static_cast<std::uint8_t>(std::clamp(40.0 * level + 30.0 * nd(rng), 0.0, 255.0));
    e.activity = std::array<double, 3>{level, level, level};
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<const Example*> ptrs(const std::vector<Example>& v, std::size_t from, std::size_t to) {
  std::vector<const Example*> out;
  for (std::size_t i = from; i < to; ++i) out.push_back(&v[i]);
  return out;
}

SplitAssignment split_of(const std::vector<Example>& v, std::size_t train_end) {
  SplitAssignment s;
  for (std::size_t i = 0; i < v.size(); ++i) s.patients[v[i].patient_id] = i < train_end ? Split::train : Split::test;
  return s;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("melon_train_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("batch partitioning and class weights") {
  CHECK(batch_count(417, 16) == 27);
  CHECK(batch_count(16, 16) == 1);
  CHECK(batch_count(0, 16) == 0);

  auto ex = toy_examples(10, 1);  // classes 1,2,3,4,1,2,3,4,1,2
  const auto w = class_weights(ptrs(ex, 0, 10));
  CHECK(w[0] == doctest::Approx(10.0 / (4 * 3)));
  CHECK(w[2] == doctest::Approx(10.0 / (4 * 2)));
  const auto w2 = class_weights(ptrs(ex, 0, 2));
  CHECK(w2[0] == doctest::Approx(1.0));
  CHECK(w2[2] == 1.0);
}

TEST_CASE("early stopping arithmetic") {
  const std::vector<double> seq{.6, .7, .7, .69, .68, .67, .66, .65, .64, .63};
  EarlyStopping s{7};
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= seq.size(); ++e) {
    s.update(e, seq[e - 1]);
    if (s.should_stop(e)) {
      stopped = e;
      break;
    }
  }
  CHECK(stopped == 9);
  CHECK(s.best_epoch == 2);

  // Never past best + patience, for random metric streams.
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.4, 0.9);
  for (int trial = 0; trial < 200; ++trial) {
    EarlyStopping st{1 + static_cast<std::size_t>(trial % 9)};
    std::size_t e = 1;
    for (; e <= 100; ++e) {
      st.update(e, u(rng));
      if (st.should_stop(e)) break;
    }
    CHECK(std::min<std::size_t>(e, 100) <= st.best_epoch + st.patience);
  }
}

TEST_CASE("scripted validation curve selects the epoch-2 model") {
  auto ex = toy_examples(12, 3);
  const auto tr = ptrs(ex, 0, 8), va = ptrs(ex, 8, 12);
  const std::vector<double> seq{.6, .7, .7, .69, .68, .67, .66, .65, .64, .63, .62, .61};
  TrainConfig cfg = fast_train();
  cfg.max_epochs = 12;
  TrainHooks hooks;
  hooks.metric_override = [&](std::size_t epoch) { return std::optional<double>(seq[epoch - 1]); };
  const auto run = train(tr, va, tiny_model(), cfg, nullptr, hooks);
  CHECK(run.epochs_run == 9);
  CHECK(run.best_epoch == 2);
  CHECK(run.checkpoint.epoch == 2);
  CHECK(run.checkpoint.best_val_auroc == 0.7);
  CHECK(run.history.size() == 9);

  cfg.max_epochs = 2;
  const auto two = train(tr, va, tiny_model(), cfg, nullptr, hooks);
  CHECK(two.checkpoint.tensors.size() == run.checkpoint.tensors.size());
  bool same = true;
  for (const auto& [name, blob] : run.checkpoint.tensors) same = same && two.checkpoint.tensors.at(name).values == blob.values;
  CHECK(same);
}

TEST_CASE("training is deterministic and consumes only train windows") {
  auto ex = toy_examples(16, 4);
  const auto tr = ptrs(ex, 0, 12), va = ptrs(ex, 12, 16);
  std::set<std::string> seen;
  TrainHooks hooks;
  hooks.on_sample = [&](const Example& e) { seen.insert(e.patient_id); };
  const auto a = train(tr, va, tiny_model(), fast_train(), nullptr, hooks);
  const auto b = train(tr, va, tiny_model(), fast_train());
  for (const auto& name : seen) CHECK(std::stoi(name.substr(1)) < 12);
  CHECK(seen.size() == 12);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_auroc == b.history[i].val_auroc);
  }
  CHECK(a.best_epoch == b.best_epoch);
  CHECK(std::isfinite(a.history.back().train_loss));

  CHECK_THROWS_AS(train(tr, ptrs(ex, 11, 16), tiny_model(), fast_train()), LeakageError);
  CHECK_THROWS_AS(train({}, va, tiny_model(), fast_train()), DataError);
  CHECK_THROWS_AS(train(tr, {}, tiny_model(), fast_train()), DataError);
}

TEST_CASE("pretraining") {
  auto ex = toy_examples(8, 5);
  const auto split = split_of(ex, 6);
  TrainConfig cfg = fast_train();
  cfg.pretrain_epochs = 4;

  SUBCASE("refuses windows of non-train patients") {
    try {
      pretrain(ptrs(ex, 0, 8), split, tiny_model(), cfg);
      FAIL("expected a leakage error");
    } catch (const LeakageError& e) {
      CHECK(e.patient() == "T6");
      CHECK(std::string(e.what()).find("T6") != std::string::npos);
    }
  }
  SUBCASE("loss falls and runs repeat exactly") {
    const auto a = pretrain(ptrs(ex, 0, 6), split, tiny_model(), cfg);
    const auto b = pretrain(ptrs(ex, 0, 6), split, tiny_model(), cfg);
    REQUIRE(a.losses.size() == 5);
    CHECK(a.losses.back() < a.losses.front());
    CHECK(a.losses == b.losses);
    CHECK(a.checkpoint.kind == "pretrain");
    for (const auto& [name, blob] : a.checkpoint.tensors) CHECK(name.rfind("moe.", 0) == 0);

    // Warm start replaces the cold encoder weights.
    const auto tr = ptrs(ex, 0, 4), va = ptrs(ex, 4, 8);
    TrainConfig one = cfg;
    one.max_epochs = 1;
    const auto cold = train(tr, va, tiny_model(), one);
    const auto warm = train(tr, va, tiny_model(), one, &a.checkpoint);
    CHECK(cold.init_digest != warm.init_digest);
  }
}

TEST_CASE("checkpoint container") {
  auto ex = toy_examples(8, 6);
  TrainConfig cfg = fast_train();
  cfg.max_epochs = 1;
  const auto run = train(ptrs(ex, 0, 4), ptrs(ex, 4, 8), tiny_model(), cfg);
  const auto path = temp_path("model.ckpt");
  save_checkpoint(path, run.checkpoint);

  const auto loaded = load_checkpoint(path);
  CHECK(loaded.epoch == run.checkpoint.epoch);
  CHECK(loaded.norm.mean == run.checkpoint.norm.mean);
  const auto m1 = model_from_checkpoint(run.checkpoint), m2 = model_from_checkpoint(loaded);
  for (const auto& e : ex) {
    const auto a = melon_forward(m1, e.image, e.features, run.checkpoint.norm);
    const auto b = melon_forward(m2, e.image, e.features, loaded.norm);
    CHECK(std::memcmp(a.data(), b.data(), sizeof a) == 0);
  }

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  CHECK(bytes.compare(0, 5, "MELN1") == 0);
  auto write_variant = [&](const std::string& data) {
    const auto p = temp_path("variant.ckpt");
    std::ofstream(p, std::ios::binary) << data;
    return p;
  };

  SUBCASE("corrupted version byte") {
    std::string b = bytes;
    b[8] = static_cast<char>(b[8] + 1);
    try {
      load_checkpoint(write_variant(b));
      FAIL("expected a checkpoint error");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("version") != std::string::npos);
    }
  }
  SUBCASE("corrupted magic") {
    std::string b = bytes;
    b[0] = 'X';
    CHECK_THROWS_AS(load_checkpoint(write_variant(b)), CheckpointError);
  }
  SUBCASE("truncated file") {
    CHECK_THROWS_AS(load_checkpoint(write_variant(bytes.substr(0, bytes.size() - 7))), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(write_variant(bytes.substr(0, 30))), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(write_variant(bytes.substr(0, 10))), CheckpointError);
  }
  SUBCASE("mismatched configuration names the tensor") {
    Checkpoint c = loaded;
    c.model.sequence.hidden = 16;
    try {
      model_from_checkpoint(c);
      FAIL("expected a manifest error");
    } catch (const CheckpointError& e) {
      CHECK(std::string(e.what()).find("moe.") != std::string::npos);
      CHECK(std::string(e.what()).find("shape") != std::string::npos);
    }
  }
  fs::remove_all(path.parent_path());
}

TEST_CASE("run configuration") {
  RunConfig c;
  c.train.patience = 3;
  c.model.sequence.top_k = 2;
  c.model.image.stages = {{8, 1}, {16, 1}};
  c.synth.burst_rate = {2, 4, 8, 16};
  const auto path = temp_path("run.json");
  save_run_config(path, c);
  const auto back = load_run_config(path);
  CHECK(to_json(back) == to_json(c));
  CHECK(back.model.image.stages.size() == 2);

  Json j = to_json(c);
  j["train"]["learning_rate"] = 0.1;
  RunConfig r;
  try {
    from_json(j, r);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("train.learning_rate") != std::string::npos);
  }
  Json bad = to_json(c);
  bad["train"]["batch_size"] = "sixteen";
  CHECK_THROWS_AS(from_json(bad, r), ConfigError);
  Json neg = to_json(c);
  neg["train"]["batch_size"] = -4;
  CHECK_THROWS_AS(from_json(neg, r), ConfigError);
  Json partial{{"train", {{"seed", 9}}}};
  RunConfig p;
  from_json(partial, p);
  CHECK(p.train.seed == 9);
  CHECK(p.train.batch_size == 16);
  fs::remove_all(path.parent_path());
}
