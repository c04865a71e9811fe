#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "melon/synth.hpp"
#include "melon/signal.hpp"

namespace fs = std::filesystem;
using namespace melon;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<OffInterval> plain(const std::vector<OffIntervalRow>& rows) {
  std::vector<OffInterval> out;
  for (const auto& r : rows) out.push_back(r.interval);
  return out;
}

}  // namespace

TEST_CASE("latent classes are balanced and seeded") {
  SynthConfig c;
  c.patients = 10;
  const auto a = latent_classes(c);
  std::array<int, 4> counts{};
  for (auto k : a) ++counts[class_index(k)];
  CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
  CHECK(latent_classes(c) == a);
  c.seed = 5;
  c.patients = 40;
  SynthConfig d = c;
  d.seed = 6;
  CHECK(latent_classes(c) != latent_classes(d));
}

TEST_CASE("config validation") {
  SynthConfig c;
  CHECK_NOTHROW(c.validate());
  c.patients = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SynthConfig{};
  c.burst_rate = {1, 6, 6, 60};
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SynthConfig{};
  c.burst_amplitude[0] = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = SynthConfig{};
  c.max_windows = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("generated patient structure") {
  SynthConfig c;
  c.patients = 4;
  c.min_windows = 2;
  c.max_windows = 2;
  c.off_probability = 1.0;
  c.seed = 3;
  const auto p = generate_patient(c, 1);
  CHECK(p.recording.samples.size() == 2 * kWindowSamples);
  CHECK_NOTHROW(p.recording.validate());
  REQUIRE(p.shifts.size() == 2);
  CHECK(p.shifts[0].mobility == p.latent);
  CHECK(p.shifts[1].shift_start == p.shifts[0].shift_end);
  REQUIRE(p.offs.size() == 2);

  // Off rows mask exactly their own span of the grid.
  auto windows = cut_windows(p.recording, p.shifts, plain(p.offs));
  REQUIRE(windows.size() == 2);
  for (std::size_t w = 0; w < 2; ++w) {
    const auto& o = p.offs[w].interval;
    const double start = windows[w].window_start;
    std::size_t expected = 0;
    for (std::size_t i = 0; i < kWindowSamples; ++i) {
      const double t = start + static_cast<double>(i) / kSampleRate;
      expected += (t >= o.start && t < o.end) ? 0 : 1;
    }
    CHECK(windows[w].valid_count() == expected);
  }

  const auto again = generate_patient(c, 1);
  CHECK(again.recording.samples.back().x == p.recording.samples.back().x);
  CHECK_THROWS_AS(generate_patient(c, 4), ConfigError);
}

TEST_CASE("motion intensity rises with class and gravity stays near 1 g") {
  SynthConfig c;
  c.patients = 52;
  c.min_windows = c.max_windows = 1;
  c.seed = 11;
  std::array<double, 4> vm_std{}, vm{};
  std::array<int, 4> n{};
  for (std::size_t i = 0; i < c.patients; ++i) {
    const auto p = generate_patient(c, i);
    const auto w = cut_windows(p.recording, p.shifts, plain(p.offs)).at(0);
    const auto seq = build_feature_sequence(w);
    double s = 0.0, m = 0.0;
    std::size_t rows = 0;
    for (std::size_t r = 0; r < kFeatureRows; ++r) {
      if (!seq.mask[r]) continue;
      s += seq.at(r, 1);
      m += seq.at(r, 0);
      ++rows;
    }
    const auto k = class_index(p.latent);
    vm_std[k] += s / static_cast<double>(rows);
    vm[k] += m / static_cast<double>(rows);
    ++n[k];
  }
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(n[k] == 13);
    vm_std[k] /= n[k];
    vm[k] /= n[k];
    CHECK(vm[k] == doctest::Approx(1.0).epsilon(0.05));
  }
  CHECK(vm_std[0] < vm_std[1]);
  CHECK(vm_std[1] < vm_std[2]);
  CHECK(vm_std[2] < vm_std[3]);
}

TEST_CASE("sway rotates gravity without changing its magnitude") {
  SynthConfig c;
  c.patients = 8;
  c.min_windows = c.max_windows = 1;
  c.off_probability = 0.0;
  c.noise_sd = 0.0;
  c.burst_amplitude = {1e-9, 1e-9, 1e-9, 1e-9};
  SynthConfig still = c;
  still.sway_amplitude = 0.0;
  std::set<double> seen;
  for (std::size_t i = 0; i < c.patients; ++i) {
    const auto p = generate_patient(c, i);
    const auto q = generate_patient(still, i);
    CHECK(q.sway == 0.0);
    CHECK(p.sway >= 0.0);
    CHECK(p.sway <= c.sway_amplitude);
    seen.insert(p.sway);
    double worst = 0.0, moved = 0.0;
    for (std::size_t k = 0; k < p.recording.samples.size(); ++k) {
      const auto& s = p.recording.samples[k];
      worst = std::max(worst, std::abs(std::sqrt(s.x * s.x + s.y * s.y + s.z * s.z) - 1.0));
      moved = std::max(moved, std::abs(s.z - q.recording.samples[k].z));
    }
    CHECK(worst < 1e-6);
    CHECK(moved > 0.25 * p.sway);
  }
  CHECK(seen.size() == c.patients);
}

TEST_CASE("cohort files are deterministic and load through ingest") {
  SynthConfig c;
  c.patients = 4;
  c.min_windows = c.max_windows = 1;
  c.off_probability = 0.5;
  c.seed = 21;
  const auto root = fs::temp_directory_path() / ("melon_synth_" + std::to_string(::getpid()));
  write_cohort(c, root / "a");
  write_cohort(c, root / "b");
  for (const char* f : {"labels.csv", "off_intervals.csv", "manifest.json", "recordings/S002_wrist.csv",
                        "recordings/S002_wrist.json"}) {
    CHECK(slurp(root / "a" / f) == slurp(root / "b" / f));
  }

  const auto labels = load_labels(root / "a" / "labels.csv");
  CHECK(labels.size() == 4);
  const auto offs = load_off_intervals(root / "a" / "off_intervals.csv");
  std::size_t expected_offs = 0;
  for (std::size_t i = 0; i < c.patients; ++i) expected_offs += generate_patient(c, i).offs.size();
  CHECK(offs.size() == expected_offs);
  const auto rec = load_recording(root / "a" / "recordings" / "S002_wrist.csv");
  CHECK(rec.patient_id == "S002");
  CHECK(rec.samples.size() == kWindowSamples);
  CHECK(rec.samples[100].z == generate_patient(c, 2).recording.samples[100].z);
  fs::remove_all(root);
}
