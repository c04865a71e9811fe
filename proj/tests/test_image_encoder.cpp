#include <doctest.h>

#include "melon/ad/gradcheck.hpp"
#include "melon/image_encoder.hpp"
#include "test_util.hpp"

using melon::ImageEncoder;
using melon::ImageEncoderConfig;
using melon::ad::Tensor;
namespace ad = melon::ad;

namespace {

ImageEncoderConfig tiny() {
  ImageEncoderConfig c;
  c.height = c.width = 16;
  c.stages = {{4, 1}};
  c.projection = 6;
  return c;
}

}  // namespace

TEST_CASE("image embedding shape, range and determinism") {
  ImageEncoderConfig c;
  c.height = c.width = 64;
  ImageEncoder<float> enc(c, 1);
  auto x = testutil::uniform<float>({3, 64, 64}, 2, 0.0, 1.0, false);
  ad::NoGrad ng;
  auto a = enc(x), b = enc(x);
  REQUIRE(a.shape() == ad::Shape{512});
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  for (float v : a.data()) CHECK(v >= 0.0f);
}

TEST_CASE("default input size runs end to end") {
  ImageEncoder<float> enc(ImageEncoderConfig{}, 3);
  ad::NoGrad ng;
  auto y = enc(testutil::uniform<float>({3, 224, 224}, 4, 0.0, 1.0, false));
  CHECK(y.shape() == ad::Shape{512});
  CHECK(enc.features(testutil::uniform<float>({3, 224, 224}, 4, 0.0, 1.0, false)).shape() ==
        ad::Shape{64, 28, 28});
}

TEST_CASE("wrong channel count is rejected") {
  ImageEncoder<float> enc(tiny(), 5);
  CHECK_THROWS_AS(enc(Tensor<float>::zeros({1, 16, 16})), melon::ShapeError);
}

TEST_CASE("training mode applies dropout") {
  ImageEncoder<float> enc(tiny(), 6);
  auto x = testutil::uniform<float>({3, 16, 16}, 7, 0.0, 1.0, false);
  melon::nn::ForwardContext train{true, 11};
  auto a = enc(x, train), b = enc(x, train), e = enc(x);
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), e.data().begin()));
}

TEST_CASE("stage output shapes") {
  // Each stride-2 stage maps n to (n - 1) / 2 + 1.
  auto stride_oracle = [](std::size_t n, std::size_t stages) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < stages; ++i) out.push_back(n = (n + 1) / 2);
    return out;
  };
  ImageEncoderConfig c;
  auto shapes = melon::receptive_shape_check(c);
  REQUIRE(shapes.size() == 3);
  const auto expected = stride_oracle(224, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(shapes[i].first == expected[i]);
    CHECK(shapes[i].second == expected[i]);
  }
  CHECK(shapes[0].first == 112);
  CHECK(shapes[1].first == 56);
  CHECK(shapes[2].first == 28);

  auto small = melon::receptive_shape_check(c, 33, 33);
  CHECK(small.size() == 3);
  CHECK(small.back().first == stride_oracle(33, 3).back());

  CHECK(melon::receptive_shape_check(tiny()).size() == 1);
  CHECK_THROWS_AS(melon::receptive_shape_check(c, 0, 224), melon::ConfigError);

  ImageEncoderConfig bad;
  bad.stages = {{6, 1}};
  CHECK_THROWS_AS(bad.validate(), melon::ConfigError);
}

TEST_CASE("image encoder passes the gradient check") {
  ImageEncoder<double> enc(tiny(), 8);
  auto x = testutil::uniform<double>({3, 16, 16}, 9, 0.0, 1.0);
  std::vector<Tensor<double>> leaves{x};
  for (auto& p : enc.parameters()) leaves.push_back(p.tensor);
  ad::GradCheckOptions opt;
  opt.max_entries_per_leaf = 40;
  auto r = ad::gradient_check([&] { return testutil::probe(enc(x)); }, leaves, opt);
  CHECK(r.checked > 200);
  CHECK(r.max_rel_error <= 1e-4);
}

TEST_CASE("residual blocks with zero final gain reduce to their shortcut") {
  ImageEncoderConfig c = tiny();
  c.stages = {{4, 2}, {8, 2}};
  ImageEncoder<double> enc(c, 10);
  for (auto& st : enc.stages)
    for (auto& blk : st)
      for (auto& g : blk.norm2_gain.mutable_data()) g = 0.0;
  auto x = testutil::uniform<double>({3, 16, 16}, 11, 0.0, 1.0, false);

  Tensor<double> h = enc.stem_path(x);
  for (const auto& st : enc.stages)
    for (const auto& blk : st) h = ad::relu(blk.shortcut_path(h));
  auto expected = enc.project(ad::global_avg_pool(h));
  auto got = enc(x);
  for (std::size_t i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-12));
  // Identity blocks pass their input through unchanged.
  CHECK(enc.stages[0][1].shortcut_path(h).node() == h.node());
}

TEST_CASE("per-sample results do not depend on other samples") {
  ImageEncoder<float> enc(tiny(), 12);
  auto x = testutil::uniform<float>({3, 16, 16}, 13, 0.0, 1.0, false);
  ad::NoGrad ng;
  auto alone = enc(x);
  for (std::uint64_t s = 0; s < 3; ++s) enc(testutil::uniform<float>({3, 16, 16}, 20 + s, 0.0, 1.0, false));
  auto again = enc(x);
  CHECK(std::equal(alone.data().begin(), alone.data().end(), again.data().begin()));
}
