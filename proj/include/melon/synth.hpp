#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "melon/ingest.hpp"

namespace melon {

struct SynthConfig {
  std::size_t patients = 60;
  std::size_t min_windows = 2;  // per patient, within 1..14
  std::size_t max_windows = 2;
  std::uint64_t seed = 0;
  std::array<double, kNumClasses> burst_rate{1.0, 6.0, 20.0, 60.0};        // bursts per hour
  std::array<double, kNumClasses> burst_amplitude{0.05, 0.15, 0.3, 0.6};  // g
  double burst_min_s = 5.0;
  double burst_max_s = 30.0;
  double drift_period_s = 1800.0;
  double noise_sd = 0.02;
  double off_probability = 0.1;  // per window
  // Log-normal spread of per-patient rate and amplitude multipliers.
  double patient_spread = 0.4;
  // Per-patient orientation sway: a slow rotation of the gravity vector with
  // amplitude uniform in [0, sway_amplitude] rad. Leaves |g| unchanged.
  double sway_amplitude = 0.3;
  double sway_period_s = 40.0;
  double start_time = 1.7e9;
  Site site = Site::wrist;

  void validate() const;
};

struct SynthPatient {
  RawRecording recording;
  std::vector<ShiftLabel> shifts;
  std::vector<OffIntervalRow> offs;
  MobilityClass latent = MobilityClass::CompletelyImmobile;
  double rate_multiplier = 1.0;
  double amplitude_multiplier = 1.0;
  double sway = 0.0;  // rad
};

std::string synth_patient_id(std::size_t index);

// Balanced latent classes: index i gets class (i mod 4) after a seeded shuffle.
std::vector<MobilityClass> latent_classes(const SynthConfig& cfg);

// Deterministic in (cfg, index); patients are independent of each other.
SynthPatient generate_patient(const SynthConfig& cfg, std::size_t index);

// Writes recordings/<id>_<site>.csv (+ sidecar), labels.csv, off_intervals.csv
// and manifest.json under `dir`.
void write_cohort(const SynthConfig& cfg, const std::filesystem::path& dir);

}  // namespace melon
