#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "melon/types.hpp"

namespace melon {

inline constexpr double kSampleRate = 20.0;
inline constexpr double kWindowSeconds = 43200.0;
inline constexpr std::size_t kWindowSamples = 864000;

using Vec3 = std::array<double, 3>;

struct Sample {
  double t = 0.0;
  double x = 0.0, y = 0.0, z = 0.0;
};

struct RawRecording {
  std::string patient_id;
  Site site = Site::wrist;
  std::vector<Sample> samples;
  double nominal_rate = kSampleRate;

  // Throws DataError/OrderingError when an invariant is broken.
  void validate() const;
};

struct OffInterval {
  double start = 0.0;
  double end = 0.0;
};

struct OffIntervalRow {
  std::string patient_id;
  Site site = Site::wrist;
  OffInterval interval;
};

struct ShiftLabel {
  std::string patient_id;
  double shift_start = 0.0;
  double shift_end = 0.0;
  MobilityClass mobility = MobilityClass::CompletelyImmobile;
};

struct LabeledWindow {
  std::string patient_id;
  double window_start = 0.0;
  double duration = kWindowSeconds;
  std::optional<MobilityClass> label;
  std::vector<Vec3> samples;         // kWindowSamples rows on the 20 Hz grid
  std::vector<std::uint8_t> valid;   // 1 where a real, worn-device sample exists

  std::size_t valid_count() const;
};

// Metadata used when a recording has no sidecar.
struct RecordingDefaults {
  std::string patient_id;
  Site site = Site::wrist;
};

// Sidecar path for a recording CSV: same stem, ".json" extension.
std::filesystem::path sidecar_path(const std::filesystem::path& csv);

RawRecording load_recording(const std::filesystem::path& path, const RecordingDefaults& defaults = {});
void write_recording(const std::filesystem::path& path, const RawRecording& rec);

std::vector<OffIntervalRow> load_off_intervals(const std::filesystem::path& path);
void write_off_intervals(const std::filesystem::path& path, std::span<const OffIntervalRow> rows);
std::vector<ShiftLabel> load_labels(const std::filesystem::path& path);
void write_labels(const std::filesystem::path& path, std::span<const ShiftLabel> rows);

// Off intervals that belong to the given recording.
std::vector<OffInterval> intervals_for(std::span<const OffIntervalRow> rows, const std::string& patient,
                                       Site site);

// Nearest-sample resampling onto the 20 Hz grid starting at `start`, with
// off-interval and gap masking. Always returns kWindowSamples rows.
LabeledWindow segment_window(const RawRecording& rec, double start, std::span<const OffInterval> offs);

// Mobility score of the shift containing `t` for the patient, if any.
std::optional<MobilityClass> label_at(std::span<const ShiftLabel> shifts, const std::string& patient,
                                      double t);

// One labelled window per shift of this patient that overlaps the recording.
std::vector<LabeledWindow> cut_windows(const RawRecording& rec, std::span<const ShiftLabel> shifts,
                                       std::span<const OffInterval> offs);

struct WindowKey {
  std::string patient_id;
  MobilityClass label = MobilityClass::CompletelyImmobile;
};

struct SplitRatios {
  double dev = 0.8;    // development share; the rest is test
  double train = 0.8;  // train share of development; the rest is validation
};

struct SplitAssignment {
  std::map<std::string, Split> patients;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  bool contains(const std::string& patient) const { return patients.count(patient) != 0; }
  // Throws DataError for an unknown patient.
  Split of(const std::string& patient) const;
  std::vector<std::string> members(Split s) const;
};

SplitAssignment stratified_split(std::span<const WindowKey> windows, const SplitRatios& ratios = {},
                                 std::uint64_t seed = 0);
SplitAssignment stratified_split(std::span<const LabeledWindow> windows, const SplitRatios& ratios = {},
                                 std::uint64_t seed = 0);

void write_split_manifest(const std::filesystem::path& path, const SplitAssignment& split);
SplitAssignment load_split_manifest(const std::filesystem::path& path);

}  // namespace melon
