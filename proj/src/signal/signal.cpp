#include "melon/signal.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>

#include <fftw3.h>

namespace melon {

namespace {

// FFTW plans are created once per length; planning is not thread-safe,
// execution through the new-array interface is.
class RealFft {
 public:
  static const RealFft& get(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, std::unique_ptr<RealFft>> cache;
    std::lock_guard lock(mu);
    auto& slot = cache[n];
    if (!slot) slot.reset(new RealFft(n));
    return *slot;
  }

  // out receives n / 2 + 1 bins of |X_k|^2.
  void power(const double* in, double* out) const {
    thread_local std::vector<std::complex<double>> spec;
    spec.resize(n_ / 2 + 1);
    // r2c transforms leave the input untouched.
    fftw_execute_dft_r2c(plan_, const_cast<double*>(in), reinterpret_cast<fftw_complex*>(spec.data()));
    for (std::size_t k = 0; k < spec.size(); ++k) out[k] = std::norm(spec[k]);
  }

  ~RealFft() { fftw_destroy_plan(plan_); }

 private:
  explicit RealFft(std::size_t n) : n_(n) {
    std::vector<double> in(n);
    std::vector<std::complex<double>> out(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(), reinterpret_cast<fftw_complex*>(out.data()), FFTW_ESTIMATE | FFTW_UNALIGNED);
  }
  std::size_t n_;
  fftw_plan plan_;
};

}  // namespace

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

Spectrogram stft_power(std::span<const double> signal, const StftOptions& opt) {
  if (opt.nperseg < 2 || opt.hop == 0 || !(opt.rate > 0.0)) {
    throw ConfigError("stft: nperseg >= 2, hop >= 1 and rate > 0 are required");
  }
  if (signal.size() < opt.nperseg) {
    throw DataError("stft: signal of " + std::to_string(signal.size()) + " samples is shorter than one " +
                    std::to_string(opt.nperseg) + "-sample segment");
  }
  Spectrogram s;
  s.bins = opt.nperseg / 2 + 1;
  s.frames = (signal.size() - opt.nperseg) / opt.hop + 1;
  s.bin_hz = opt.rate / static_cast<double>(opt.nperseg);
  s.hop_s = static_cast<double>(opt.hop) / opt.rate;
  s.values.assign(s.bins * s.frames, 0.0);

  const auto win = hann_window(opt.nperseg);
  const auto& fft = RealFft::get(opt.nperseg);
  std::vector<double> frame(opt.nperseg), power(s.bins);
  for (std::size_t t = 0; t < s.frames; ++t) {
    const double* src = signal.data() + t * opt.hop;
    for (std::size_t i = 0; i < opt.nperseg; ++i) frame[i] = src[i] * win[i];
    fft.power(frame.data(), power.data());
    for (std::size_t k = 0; k < s.bins; ++k) s.values[k * s.frames + t] = power[k];
  }
  return s;
}

std::vector<std::vector<ResampleTap>> bilinear_weights(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw ConfigError("resample: sizes must be positive");
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double support = std::max(scale, 1.0);
  std::vector<std::vector<ResampleTap>> taps(out);
  for (std::size_t i = 0; i < out; ++i) {
    const double centre = (static_cast<double>(i) + 0.5) * scale;
    const auto lo = static_cast<long>(std::floor(centre - support));
    const auto hi = static_cast<long>(std::ceil(centre + support));
    double total = 0.0;
    for (long j = std::max(lo, 0L); j < std::min(hi, static_cast<long>(in)); ++j) {
      const double d = std::abs((static_cast<double>(j) + 0.5 - centre) / support);
      if (d < 1.0) {
        taps[i].push_back({static_cast<std::size_t>(j), 1.0 - d});
        total += 1.0 - d;
      }
    }
    for (auto& t : taps[i]) t.weight /= total;
  }
  return taps;
}

SpectroImage spectro_to_image(const Spectrogram& sx, const Spectrogram& sy, const Spectrogram& sz,
                              std::size_t height, std::size_t width) {
  if (sx.bins != sy.bins || sx.bins != sz.bins || sx.frames != sy.frames || sx.frames != sz.frames) {
    throw ShapeError("spectro_to_image: the three spectrograms must share a shape");
  }
  if (height == 0 || width == 0) throw ConfigError("spectro_to_image: output size must be positive");
  const std::size_t F = sx.bins, T = sx.frames;
  const auto col_taps = bilinear_weights(T, width);
  const auto row_taps = bilinear_weights(F, height);

  SpectroImage img;
  img.height = height;
  img.width = width;
  img.pixels.assign(3 * height * width, 0);
  const Spectrogram* chans[3] = {&sx, &sy, &sz};
  std::vector<double> logv(F * T), narrow(F * width), full(height * width);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto& v = chans[c]->values;
    // Flip so the highest frequency lands on row 0.
    for (std::size_t f = 0; f < F; ++f) {
      for (std::size_t t = 0; t < T; ++t) logv[(F - 1 - f) * T + t] = std::log(v[f * T + t] + kLogOffset);
    }
    for (std::size_t r = 0; r < F; ++r) {
      for (std::size_t x = 0; x < width; ++x) {
        double acc = 0.0;
        for (const auto& tap : col_taps[x]) acc += tap.weight * logv[r * T + tap.index];
        narrow[r * width + x] = acc;
      }
    }
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        double acc = 0.0;
        for (const auto& tap : row_taps[y]) acc += tap.weight * narrow[tap.index * width + x];
        full[y * width + x] = acc;
      }
    }
    const auto [mn, mx] = std::minmax_element(full.begin(), full.end());
    const double lo = *mn, range = *mx - *mn;
    std::uint8_t* dst = img.pixels.data() + c * height * width;
    if (!(range > 1e-12 * std::max(1.0, std::abs(lo)))) continue;
    for (std::size_t i = 0; i < full.size(); ++i) {
      const double p = std::floor(255.0 * (full[i] - lo) / range + 0.5);
      dst[i] = static_cast<std::uint8_t>(std::clamp(p, 0.0, 255.0));
    }
  }
  return img;
}

std::size_t FeatureSequence::valid_rows() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

double dominant_frequency(std::span<const double> series, double rate) {
  const std::size_t n = series.size();
  if (n < 2) return 0.0;
  std::vector<double> power(n / 2 + 1);
  RealFft::get(n).power(series.data(), power.data());
  double total = 0.0;
  std::size_t best = 1;
  const double norm = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  for (std::size_t k = 1; k < power.size(); ++k) {
    power[k] *= norm;
    total += power[k];
    if (power[k] > power[best]) best = k;
  }
  if (total < 1e-12) return 0.0;
  return static_cast<double>(best) * rate / static_cast<double>(n);
}

FeatureVector segment_features(std::span<const Vec3> samples, std::span<const std::uint8_t> valid) {
  if (!valid.empty() && valid.size() != samples.size()) {
    throw ShapeError("window features: mask length " + std::to_string(valid.size()) + " does not match " +
                     std::to_string(samples.size()) + " samples");
  }
  std::vector<double> vm, angle;
  vm.reserve(samples.size());
  angle.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (!valid.empty() && !valid[i]) continue;
    const auto& s = samples[i];
    const double m = std::sqrt(s[0] * s[0] + s[1] * s[1] + s[2] * s[2]);
    vm.push_back(m);
    angle.push_back(m > 0.0 ? std::acos(std::clamp(s[0] / m, -1.0, 1.0)) : 0.0);
  }
  FeatureVector f{};
  if (vm.empty()) return f;
  const auto mean_std = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(var / n)};
  };
  std::tie(f[0], f[1]) = mean_std(vm);
  std::tie(f[2], f[3]) = mean_std(angle);
  f[4] = dominant_frequency(vm);
  return f;
}

FeatureVector window_features(std::span<const Vec3> samples, std::span<const std::uint8_t> valid) {
  if (samples.size() != kMinuteSamples) {
    throw ShapeError("window features: expected " + std::to_string(kMinuteSamples) + " samples, got " +
                     std::to_string(samples.size()));
  }
  return segment_features(samples, valid);
}

FeatureSequence build_feature_sequence(const LabeledWindow& window) {
  if (window.samples.size() != window.valid.size()) {
    throw ShapeError("feature sequence: samples and mask lengths differ");
  }
  FeatureSequence seq;
  const std::size_t n = window.samples.size();
  const std::span<const Vec3> all(window.samples);
  const std::span<const std::uint8_t> mask(window.valid);
  for (std::size_t r = 0; r < kFeatureRows; ++r) {
    const std::size_t begin = r * kFeatureStride;
    if (begin >= n) break;
    const std::size_t len = std::min(kMinuteSamples, n - begin);
    const auto valid = mask.subspan(begin, len);
    const auto good = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
    if (2 * good < len) continue;
    const auto f = segment_features(all.subspan(begin, len), valid);
    std::copy(f.begin(), f.end(), seq.values.begin() + static_cast<long>(r * kFeatureCols));
    seq.mask[r] = 1;
  }
  return seq;
}

SpectroImage window_image(const LabeledWindow& window, std::size_t height, std::size_t width) {
  std::vector<double> axis(window.samples.size());
  Spectrogram s[3];
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < axis.size(); ++i) axis[i] = window.samples[i][c];
    s[c] = stft_power(axis);
  }
  return spectro_to_image(s[0], s[1], s[2], height, width);
}

}  // namespace melon
