#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "melon/ingest.hpp"

namespace melon {

struct StftOptions {
  double rate = kSampleRate;
  std::size_t nperseg = 64;
  std::size_t hop = 32;  // nperseg - overlap
};

// Power spectrogram, row-major [bin][frame].
struct Spectrogram {
  std::size_t bins = 0;
  std::size_t frames = 0;
  std::vector<double> values;
  double bin_hz = 0.3125;
  double hop_s = 1.6;

  double at(std::size_t bin, std::size_t frame) const { return values[bin * frames + frame]; }
};

// Periodic Hann window: 0.5 - 0.5 cos(2 pi n / N).
std::vector<double> hann_window(std::size_t n);

// |DFT|^2 of Hann-windowed frames; frames = (n - nperseg) / hop + 1.
Spectrogram stft_power(std::span<const double> signal, const StftOptions& opt = {});

// Planar 8-bit image [channel][row][col]; channels are the x, y, z axes.
// Row 0 holds the highest frequency.
struct SpectroImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }
  std::span<const std::uint8_t> channel(std::size_t c) const {
    return std::span<const std::uint8_t>(pixels).subspan(c * height * width, height * width);
  }
};

inline constexpr double kLogOffset = 1e-10;

// log(v + 1e-10), bilinear resample to height x width (triangle filter
// widened by the scale factor when shrinking), then per-channel min-max to
// [0, 255] with round-half-up. A constant channel becomes all zero.
SpectroImage spectro_to_image(const Spectrogram& sx, const Spectrogram& sy, const Spectrogram& sz,
                              std::size_t height = 224, std::size_t width = 224);

// Resampling weights along one axis: out[i] = sum_k w * in[index].
struct ResampleTap {
  std::size_t index;
  double weight;
};
std::vector<std::vector<ResampleTap>> bilinear_weights(std::size_t in, std::size_t out);

inline constexpr std::size_t kFeatureRows = 1440;
inline constexpr std::size_t kFeatureCols = 5;
inline constexpr std::size_t kMinuteSamples = 1200;
inline constexpr std::size_t kFeatureStride = 600;

using FeatureVector = std::array<double, kFeatureCols>;

// [vm_mean, vm_std, angle_mean, angle_std, dom_freq_hz] over rows, row-major.
struct FeatureSequence {
  std::vector<double> values = std::vector<double>(kFeatureRows * kFeatureCols, 0.0);
  std::vector<std::uint8_t> mask = std::vector<std::uint8_t>(kFeatureRows, 0);

  double at(std::size_t row, std::size_t col) const { return values[row * kFeatureCols + col]; }
  std::size_t valid_rows() const;
};

// One minute (1200 samples). `valid` empty means all samples valid.
FeatureVector window_features(std::span<const Vec3> samples, std::span<const std::uint8_t> valid = {});
// Same statistics over any nonempty span; only valid samples contribute.
FeatureVector segment_features(std::span<const Vec3> samples, std::span<const std::uint8_t> valid);
// Frequency of the largest non-DC periodogram bin; 0 for a flat series.
double dominant_frequency(std::span<const double> series, double rate = kSampleRate);

FeatureSequence build_feature_sequence(const LabeledWindow& window);

// STFT of each axis followed by spectro_to_image.
SpectroImage window_image(const LabeledWindow& window, std::size_t height = 224, std::size_t width = 224);

// 8-bit RGB PNG, x -> R, y -> G, z -> B.
void write_png(const std::filesystem::path& path, const SpectroImage& img);
SpectroImage read_png(const std::filesystem::path& path);

void write_feature_csv(const std::filesystem::path& path, const FeatureSequence& seq);
FeatureSequence read_feature_csv(const std::filesystem::path& path);

}  // namespace melon
