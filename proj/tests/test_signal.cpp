#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "melon/signal.hpp"

namespace fs = std::filesystem;
using namespace melon;

namespace {

constexpr double kPi = std::numbers::pi;

std::vector<double> sine(std::size_t n, double hz, double amp = 1.0, double phase = 0.0) {
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = amp * std::sin(2.0 * kPi * hz * double(i) / 20.0 + phase);
  return v;
}

LabeledWindow window_of(const std::vector<Vec3>& samples) {
  LabeledWindow w;
  w.patient_id = "P";
  w.samples = samples;
  w.valid.assign(samples.size(), 1);
  return w;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("melon_signal_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("stft of a pure sine peaks at its bin") {
  auto sx = stft_power(sine(2048, 5.0));
  CHECK(sx.bins == 33);
  CHECK(sx.frames == (2048 - 64) / 32 + 1);
  // 5 Hz at 20/64 Hz per bin.
  const std::size_t expected_bin = static_cast<std::size_t>(std::lround(5.0 / (20.0 / 64.0)));
  CHECK(expected_bin == 16);
  for (std::size_t f = 0; f < sx.frames; ++f) {
    std::size_t best = 0;
    for (std::size_t b = 1; b < sx.bins; ++b)
      if (sx.at(b, f) > sx.at(best, f)) best = b;
    CHECK(best == expected_bin);
  }
}

TEST_CASE("stft shape for a full window and trivial inputs") {
  std::vector<double> full(kWindowSamples, 0.0);
  auto s = stft_power(full);
  CHECK(s.bins == 33);
  CHECK(s.frames == 26999);
  for (double v : s.values) CHECK(v == 0.0);
  CHECK_THROWS_AS(stft_power(std::vector<double>(63, 1.0)), DataError);
}

TEST_CASE("stft frames satisfy Parseval") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd;
  std::vector<double> x(64 * 6);
  for (auto& v : x) v = nd(rng);
  auto s = stft_power(x);
  const auto w = hann_window(64);
  for (std::size_t f = 0; f < s.frames; ++f) {
    double energy = 0.0;
    for (std::size_t i = 0; i < 64; ++i) energy += std::pow(x[f * 32 + i] * w[i], 2);
    double spectral = s.at(0, f) + s.at(32, f);
    for (std::size_t b = 1; b < 32; ++b) spectral += 2.0 * s.at(b, f);
    CHECK(spectral / 64.0 == doctest::Approx(energy).epsilon(1e-10));
  }
}

TEST_CASE("stft of a hop-shifted signal shifts its frames") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> nd;
  std::vector<double> x(64 * 8);
  for (auto& v : x) v = nd(rng);
  auto a = stft_power(x);
  auto b = stft_power(std::span<const double>(x).subspan(32));
  REQUIRE(b.frames == a.frames - 1);
  for (std::size_t bin = 0; bin < 33; ++bin)
    for (std::size_t f = 0; f < b.frames; ++f) CHECK(b.at(bin, f) == doctest::Approx(a.at(bin, f + 1)));
}

TEST_CASE("hann window is periodic") {
  auto w = hann_window(64);
  CHECK(w[0] == 0.0);
  CHECK(w[32] == doctest::Approx(1.0));
  for (std::size_t i = 1; i < 64; ++i) CHECK(w[i] == doctest::Approx(w[64 - i]));
}

TEST_CASE("bilinear weights") {
  auto up = bilinear_weights(4, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    REQUIRE(up[i].size() == 1);
    CHECK(up[i][0].index == i);
    CHECK(up[i][0].weight == doctest::Approx(1.0));
  }
  for (auto [in, out] : {std::pair<std::size_t, std::size_t>{26999, 224}, {33, 224}, {7, 3}}) {
    auto w = bilinear_weights(in, out);
    REQUIRE(w.size() == out);
    for (const auto& taps : w) {
      double s = 0.0;
      for (const auto& t : taps) {
        CHECK(t.index < in);
        CHECK(t.weight >= 0.0);
        s += t.weight;
      }
      CHECK(s == doctest::Approx(1.0));
    }
  }
}

TEST_CASE("spectrogram image") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  std::vector<double> x(64 * 40);
  for (auto& v : x) v = nd(rng);
  std::vector<double> x2(x), x3(x);
  for (auto& v : x2) v *= 3.0;
  for (auto& v : x3) v *= 0.25;
  auto s1 = stft_power(x), s2 = stft_power(x2), s3 = stft_power(x3);

  SUBCASE("scalar multiples give identical channels") {
    auto img = spectro_to_image(s1, s2, s3);
    CHECK(img.height == 224);
    CHECK(img.width == 224);
    CHECK(img.pixels.size() == 3 * 224 * 224);
    const auto c0 = img.channel(0), c1 = img.channel(1), c2 = img.channel(2);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < c0.size(); ++i) diff += (c0[i] != c1[i]) + (c0[i] != c2[i]);
    CHECK(diff == 0);
    CHECK(*std::min_element(c0.begin(), c0.end()) == 0);
    CHECK(*std::max_element(c0.begin(), c0.end()) == 255);
  }
  SUBCASE("a constant channel is all zero") {
    Spectrogram flat = s1;
    std::fill(flat.values.begin(), flat.values.end(), 0.0);
    auto img = spectro_to_image(s1, flat, s1);
    for (auto v : img.channel(1)) CHECK(v == 0);
  }
  SUBCASE("highest frequency is at the top row") {
    // A single hot bin at the top of the spectrum.
    Spectrogram s = s1;
    std::fill(s.values.begin(), s.values.end(), 1.0);
    for (std::size_t f = 0; f < s.frames; ++f) s.values[32 * s.frames + f] = 1e6;
    auto img = spectro_to_image(s, s, s, 33, s.frames);
    CHECK(img.at(0, 0, 5) == 255);
    CHECK(img.at(0, 32, 5) == 0);
  }
  SUBCASE("identity size maps log power linearly") {
    Spectrogram s = s1;
    auto img = spectro_to_image(s, s, s, 33, s.frames);
    double lo = 1e300, hi = -1e300;
    for (double v : s.values) {
      lo = std::min(lo, std::log(v + kLogOffset));
      hi = std::max(hi, std::log(v + kLogOffset));
    }
    for (std::size_t b = 0; b < 33; b += 4)
      for (std::size_t f = 0; f < s.frames; f += 7) {
        const double expected = std::floor((std::log(s.at(b, f) + kLogOffset) - lo) / (hi - lo) * 255.0 + 0.5);
        CHECK(double(img.at(0, 32 - b, f)) == expected);
      }
  }
}

TEST_CASE("window image of a full window") {
  std::vector<Vec3> samples(kWindowSamples);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double t = double(i) / 20.0;
    samples[i] = {std::sin(2 * kPi * 2.0 * t), std::cos(2 * kPi * 0.5 * t), 1.0 + 0.1 * std::sin(2 * kPi * 7.0 * t)};
  }
  auto img = window_image(window_of(samples));
  CHECK(img.height == 224);
  CHECK(img.width == 224);
  CHECK(img.pixels.size() == 3 * 224 * 224);
}

TEST_CASE("minute features") {
  SUBCASE("gravity along z") {
    std::vector<Vec3> s(1200, Vec3{0.0, 0.0, 1.0});
    auto f = window_features(s);
    CHECK(f[0] == doctest::Approx(1.0));
    CHECK(f[1] == doctest::Approx(0.0));
    CHECK(f[2] == doctest::Approx(kPi / 2.0));
    CHECK(f[3] == doctest::Approx(0.0));
    CHECK(f[4] == 0.0);
  }
  SUBCASE("gravity along x") {
    std::vector<Vec3> s(1200, Vec3{1.0, 0.0, 0.0});
    auto f = window_features(s);
    CHECK(f[0] == doctest::Approx(1.0));
    CHECK(f[2] == doctest::Approx(0.0));
    CHECK(f[3] == doctest::Approx(0.0));
  }
  SUBCASE("wrong length") {
    std::vector<Vec3> s(1000, Vec3{1.0, 0.0, 0.0});
    CHECK_THROWS_AS(window_features(s), ShapeError);
  }
  SUBCASE("a 2 Hz oscillation in magnitude") {
    std::vector<Vec3> s(1200);
    for (std::size_t i = 0; i < 1200; ++i) s[i] = {0.0, 0.0, 1.0 + 0.3 * std::sin(2 * kPi * 2.0 * double(i) / 20.0)};
    CHECK(window_features(s)[4] == doctest::Approx(2.0));
  }
  SUBCASE("oracle mean and population deviation") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd(0.0, 0.5);
    std::vector<Vec3> s(1200);
    for (auto& v : s) v = {nd(rng), nd(rng), 1.0 + nd(rng)};
    double m = 0, m2 = 0, a = 0, a2 = 0;
    for (const auto& v : s) {
      const double vm = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
      const double ang = std::acos(std::clamp(v[0] / vm, -1.0, 1.0));
      m += vm, m2 += vm * vm, a += ang, a2 += ang * ang;
    }
    m /= 1200, m2 /= 1200, a /= 1200, a2 /= 1200;
    auto f = window_features(s);
    CHECK(f[0] == doctest::Approx(m).epsilon(1e-12));
    CHECK(f[1] == doctest::Approx(std::sqrt(m2 - m * m)).epsilon(1e-9));
    CHECK(f[2] == doctest::Approx(a).epsilon(1e-12));
    CHECK(f[3] == doctest::Approx(std::sqrt(a2 - a * a)).epsilon(1e-9));
  }
}

TEST_CASE("dominant frequency recovers integer sines") {
  for (int hz = 1; hz <= 9; ++hz) {
    CHECK(dominant_frequency(sine(1200, double(hz), 0.4)) == doctest::Approx(double(hz)));
  }
  CHECK(dominant_frequency(std::vector<double>(1200, 3.0)) == 0.0);
}

TEST_CASE("features ignore sample order except dominant frequency") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> nd(0.0, 0.5);
  std::vector<Vec3> s(1200);
  for (auto& v : s) v = {nd(rng), nd(rng), 1.0 + nd(rng)};
  auto shuffled = s;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  auto a = window_features(s), b = window_features(shuffled);
  for (int k = 0; k < 4; ++k) CHECK(a[k] == doctest::Approx(b[k]).epsilon(1e-12));
}

TEST_CASE("feature sequence rows, masking and truncation") {
  std::vector<Vec3> samples(kWindowSamples, Vec3{0.0, 0.0, 1.0});
  auto w = window_of(samples);
  // Minute 100 is off; row r covers samples [600 r, 600 r + 1200).
  std::fill(w.valid.begin() + 120000, w.valid.begin() + 121200, 0);
  auto seq = build_feature_sequence(w);
  CHECK(seq.values.size() == 1440 * 5);
  // Rows 199 and 201 overlap the off minute by half, row 200 fully.
  CHECK(seq.mask[198] == 1);
  CHECK(seq.mask[199] == 1);
  CHECK(seq.mask[200] == 0);
  CHECK(seq.mask[201] == 1);
  CHECK(seq.mask[1439] == 1);
  CHECK(seq.valid_rows() == 1439);
  CHECK(seq.at(10, 2) == doctest::Approx(kPi / 2.0));
  CHECK(seq.at(200, 0) == 0.0);

  // The last row holds only 600 samples; half of it off masks it.
  std::fill(w.valid.end() - 300, w.valid.end(), 0);
  CHECK(build_feature_sequence(w).mask[1439] == 1);
  std::fill(w.valid.end() - 301, w.valid.end(), 0);
  CHECK(build_feature_sequence(w).mask[1439] == 0);
}

TEST_CASE("image and feature files round-trip") {
  SpectroImage img{5, 7, std::vector<std::uint8_t>(3 * 5 * 7)};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 11);
  const auto png = temp_path("img.png");
  write_png(png, img);
  auto back = read_png(png);
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  CHECK(back.pixels == img.pixels);

  FeatureSequence seq;
  std::mt19937_64 rng(10);
  std::normal_distribution<double> nd;
  for (auto& v : seq.values) v = nd(rng);
  for (std::size_t r = 0; r < seq.mask.size(); ++r) seq.mask[r] = r % 3 != 0;
  const auto csv = temp_path("features.csv");
  write_feature_csv(csv, seq);
  auto got = read_feature_csv(csv);
  CHECK(got.values == seq.values);
  CHECK(got.mask == seq.mask);
  fs::remove_all(png.parent_path());
}
