#include "melon/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <json.hpp>

#include "melon/nn.hpp"

namespace melon {

using nlohmann::json;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

Vec3 random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Vec3 u{nd(rng), nd(rng), nd(rng)};
  const double n = std::sqrt(u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
  if (n < 1e-12) return {0.0, 0.0, 1.0};
  return {u[0] / n, u[1] / n, u[2] / n};
}

}  // namespace

void SynthConfig::validate() const {
  if (patients < 4) throw ConfigError("synth needs at least 4 patients");
  if (min_windows < 1 || max_windows > 14 || min_windows > max_windows) {
    throw ConfigError("windows per patient must satisfy 1 <= min <= max <= 14");
  }
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    if (!(burst_rate[k] >= 0.0)) throw ConfigError("burst rates must be non-negative");
    if (k > 0 && !(burst_rate[k] > burst_rate[k - 1])) throw ConfigError("burst rates must increase with class");
    if (!(burst_amplitude[k] > 0.0)) throw ConfigError("burst amplitudes must be positive");
  }
  if (!(burst_min_s > 0.0) || burst_max_s < burst_min_s) throw ConfigError("invalid burst duration range");
  if (!(drift_period_s > 0.0)) throw ConfigError("drift period must be positive");
  if (noise_sd < 0.0) throw ConfigError("noise sd must be non-negative");
  if (off_probability < 0.0 || off_probability > 1.0) throw ConfigError("off probability must be in [0, 1]");
  if (patient_spread < 0.0) throw ConfigError("patient spread must be non-negative");
  if (sway_amplitude < 0.0) throw ConfigError("sway amplitude must be non-negative");
  if (!(sway_period_s > 0.0)) throw ConfigError("sway period must be positive");
}

std::string synth_patient_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%03zu", index);
  return buf;
}

std::vector<MobilityClass> latent_classes(const SynthConfig& cfg) {
  std::vector<MobilityClass> out(cfg.patients);
  for (std::size_t i = 0; i < cfg.patients; ++i) out[i] = static_cast<MobilityClass>(1 + i % kNumClasses);
  std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0xC1A55));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

SynthPatient generate_patient(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  if (index >= cfg.patients) throw ConfigError("patient index out of range");
  std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0x10000 + index));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> nd;

  SynthPatient p;
  p.latent = latent_classes(cfg)[index];
  const std::size_t k = class_index(p.latent);
  const std::string id = synth_patient_id(index);
  std::uniform_int_distribution<std::size_t> nwin(cfg.min_windows, cfg.max_windows);
  const std::size_t windows = nwin(rng);
  p.rate_multiplier = std::exp(cfg.patient_spread * nd(rng));
  p.amplitude_multiplier = std::exp(cfg.patient_spread * nd(rng));
  p.sway = cfg.sway_amplitude * unit(rng);

  const double t0 = cfg.start_time + static_cast<double>(index) * 14.0 * 86400.0;
  const std::size_t n = windows * kWindowSamples;

  // Slow orientation drift of the gravity vector.
  const double tilt = 0.3 + 0.9 * unit(rng), tilt_swing = 0.35 * unit(rng);
  const double phase1 = kTwoPi * unit(rng), phase2 = kTwoPi * unit(rng), azimuth = kTwoPi * unit(rng);
  const double phase3 = kTwoPi * unit(rng), phase4 = kTwoPi * unit(rng);
  std::vector<Vec3> signal(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / kSampleRate;
    const double theta = tilt + tilt_swing * std::sin(kTwoPi * t / cfg.drift_period_s + phase1) +
                         p.sway * std::sin(kTwoPi * t / cfg.sway_period_s + phase3);
    const double psi = azimuth + 0.5 * std::sin(kTwoPi * t / (1.7 * cfg.drift_period_s) + phase2) +
                       p.sway * std::sin(kTwoPi * t / (1.3 * cfg.sway_period_s) + phase4);
    signal[i] = {std::sin(theta) * std::cos(psi), std::sin(theta) * std::sin(psi), std::cos(theta)};
  }

  // Poisson-timed bursts with a half-sine envelope.
  const double rate_per_s = cfg.burst_rate[k] * p.rate_multiplier / 3600.0;
  const double duration = static_cast<double>(n) / kSampleRate;
  if (rate_per_s > 0.0) {
    std::exponential_distribution<double> gap(rate_per_s);
    for (double start = gap(rng); start < duration; start += gap(rng)) {
      const double len = cfg.burst_min_s + (cfg.burst_max_s - cfg.burst_min_s) * unit(rng);
      const double freq = 1.5 + 2.5 * unit(rng);
      const double amp = cfg.burst_amplitude[k] * p.amplitude_multiplier * (0.7 + 0.6 * unit(rng));
      const double phase = kTwoPi * unit(rng);
      const Vec3 u = random_direction(rng);
      const auto first = static_cast<std::size_t>(std::ceil(start * kSampleRate));
      const auto last = std::min(n, static_cast<std::size_t>((start + len) * kSampleRate));
      for (std::size_t i = first; i < last; ++i) {
        const double tau = static_cast<double>(i) / kSampleRate - start;
        const double v = amp * std::sin(std::numbers::pi * tau / len) * std::sin(kTwoPi * freq * tau + phase);
        for (int a = 0; a < 3; ++a) signal[i][a] += v * u[a];
      }
    }
  }

  // Device-off periods: the sensor lies still, flat.
  for (std::size_t w = 0; w < windows; ++w) {
    if (unit(rng) >= cfg.off_probability) continue;
    const double len = 1800.0 + 9000.0 * unit(rng);
    const double off = (kWindowSeconds - len) * unit(rng);
    const double a = t0 + static_cast<double>(w) * kWindowSeconds + off;
    p.offs.push_back({id, cfg.site, {a, a + len}});
    const auto first = static_cast<std::size_t>(std::ceil((a - t0) * kSampleRate));
    const auto last = std::min(n, static_cast<std::size_t>(std::ceil((a + len - t0) * kSampleRate)));
    for (std::size_t i = first; i < last; ++i) signal[i] = {0.0, 0.0, 1.0};
  }

  p.recording.patient_id = id;
  p.recording.site = cfg.site;
  p.recording.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = p.recording.samples[i];
    s.t = t0 + static_cast<double>(i) / kSampleRate;
    s.x = signal[i][0] + cfg.noise_sd * nd(rng);
    s.y = signal[i][1] + cfg.noise_sd * nd(rng);
    s.z = signal[i][2] + cfg.noise_sd * nd(rng);
  }
  for (std::size_t w = 0; w < windows; ++w) {
    const double s = t0 + static_cast<double>(w) * kWindowSeconds;
    p.shifts.push_back({id, s, s + kWindowSeconds, p.latent});
  }
  return p;
}

void write_cohort(const SynthConfig& cfg, const std::filesystem::path& dir) {
  cfg.validate();
  std::filesystem::create_directories(dir / "recordings");
  std::vector<ShiftLabel> shifts;
  std::vector<OffIntervalRow> offs;
  json patients = json::array();
  for (std::size_t i = 0; i < cfg.patients; ++i) {
    const auto p = generate_patient(cfg, i);
    const std::string file = p.recording.patient_id + "_" + std::string(site_name(cfg.site)) + ".csv";
    write_recording(dir / "recordings" / file, p.recording);
    shifts.insert(shifts.end(), p.shifts.begin(), p.shifts.end());
    offs.insert(offs.end(), p.offs.begin(), p.offs.end());
    patients.push_back({{"patient_id", p.recording.patient_id},
                        {"class", static_cast<int>(p.latent)},
                        {"windows", p.shifts.size()},
                        {"off_intervals", p.offs.size()},
                        {"rate_multiplier", p.rate_multiplier},
                        {"amplitude_multiplier", p.amplitude_multiplier},
                        {"sway", p.sway},
                        {"recording", "recordings/" + file}});
  }
  write_labels(dir / "labels.csv", shifts);
  write_off_intervals(dir / "off_intervals.csv", offs);
  json config{{"patients", cfg.patients},
              {"min_windows", cfg.min_windows},
              {"max_windows", cfg.max_windows},
              {"seed", cfg.seed},
              {"burst_rate", cfg.burst_rate},
              {"burst_amplitude", cfg.burst_amplitude},
              {"burst_min_s", cfg.burst_min_s},
              {"burst_max_s", cfg.burst_max_s},
              {"drift_period_s", cfg.drift_period_s},
              {"noise_sd", cfg.noise_sd},
              {"off_probability", cfg.off_probability},
              {"patient_spread", cfg.patient_spread},
              {"sway_amplitude", cfg.sway_amplitude},
              {"sway_period_s", cfg.sway_period_s},
              {"start_time", cfg.start_time},
              {"site", site_name(cfg.site)}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
  out << json{{"config", config}, {"patients", patients}}.dump(2) << '\n';
}

}  // namespace melon
