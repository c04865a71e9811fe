#include <doctest.h>

#include <cmath>
#include <numeric>

#include "melon/ad/gradcheck.hpp"
#include "melon/ad/ops.hpp"
#include "melon/ad/optim.hpp"
#include "test_util.hpp"

using melon::ad::Tensor;
namespace ad = melon::ad;
using testutil::probe;
using testutil::randn;

namespace {

using Fn = std::function<Tensor<double>()>;

double check(const Fn& f, std::vector<Tensor<double>> leaves) {
  auto r = ad::gradient_check(f, std::move(leaves));
  CHECK(r.checked > 0);
  return r.max_rel_error;
}

// Direct nested-loop convolution for [Ci,H,W] inputs.
std::vector<float> conv_reference(const std::vector<float>& x, std::size_t ci, std::size_t h, std::size_t w,
                                  const std::vector<float>& k, std::size_t co, std::size_t kh, std::size_t kw,
                                  const std::vector<float>& b, std::size_t stride, std::size_t pad,
                                  std::size_t& oh, std::size_t& ow) {
  oh = (h + 2 * pad - kh) / stride + 1;
  ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<float> out(co * oh * ow, 0.0f);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        double acc = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long yy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long xx = static_cast<long>(xo * stride + j) - static_cast<long>(pad);
              if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
              acc += double(x[(c * h + yy) * w + xx]) * k[((o * ci + c) * kh + i) * kw + j];
            }
        out[(o * oh + y) * ow + xo] = static_cast<float>(acc);
      }
  return out;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  auto p = ad::softmax(Tensor<float>::zeros({4}));
  for (float v : p.data()) CHECK(v == doctest::Approx(0.25f));
}

TEST_CASE("silu at one matches x times logistic") {
  const double oracle = 1.0 / (1.0 + std::exp(-1.0));
  auto y = ad::silu(Tensor<double>::scalar(1.0));
  CHECK(y.item() == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(y.item() == doctest::Approx(0.731059).epsilon(1e-6));
}

TEST_CASE("identity matmul returns the right operand") {
  std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto a = randn({3, 5}, 3, 1.0, false);
  auto y = ad::matmul(Tensor<double>::from({3, 3}, eye), a);
  REQUIRE(y.shape() == a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(y.data()[i] == a.data()[i]);
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  ad::sum(ad::mul(x, x)).backward();
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("softmax cross-entropy gradient is p minus one-hot") {
  auto z = Tensor<double>::zeros({4}, true);
  auto loss = ad::neg(ad::log(ad::slice(ad::softmax(z), 0, 0, 1)));
  ad::sum(loss).backward();
  const std::vector<double> expected{0.25 - 1.0, 0.25, 0.25, 0.25};
  for (std::size_t i = 0; i < 4; ++i) CHECK(z.grad()[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("disconnected leaf receives no gradient") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  auto unused = Tensor<double>::from({2}, {3.0, 4.0}, true);
  ad::sum(x).backward();
  CHECK_FALSE(unused.has_grad());
}

TEST_CASE("row-wise matmul ignores the other rows") {
  auto a = randn({40, 16}, 30, 1.0, false), w = randn({24, 16}, 31, 1.0, false);
  const auto full = ad::matmul_rows(a, w);
  const auto dense = ad::matmul(a, w, false, true);
  for (std::size_t i = 0; i < full.numel(); ++i) CHECK(full.data()[i] == doctest::Approx(dense.data()[i]).epsilon(1e-12));
  for (std::size_t r : {0, 7, 39}) {
    auto one = ad::matmul_rows(ad::slice(a, 0, r, r + 1), w);
    for (std::size_t j = 0; j < 24; ++j) CHECK(one.data()[j] == full.data()[r * 24 + j]);
  }
}

TEST_CASE("causal attention matches the masked softmax composition") {
  const std::size_t len = 150;
  auto q = randn({2, len, 4}, 40), k = randn({2, len, 4}, 41), v = randn({2, len, 4}, 42);
  std::vector<std::uint8_t> valid(len, 1);
  valid[0] = 0;
  valid[70] = 0;
  std::vector<std::uint8_t> allowed(len * len, 0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = 0; j <= i; ++j) allowed[i * len + j] = valid[j];
  const auto fast = ad::causal_attention(q, k, v, allowed);
  const auto slow = ad::matmul(ad::masked_softmax(ad::matmul(q, k, false, true), allowed), v);
  for (std::size_t i = 0; i < fast.numel(); ++i) CHECK(fast.data()[i] == doctest::Approx(slow.data()[i]).epsilon(1e-12));
  // Row 0 sees no valid key.
  for (std::size_t j = 0; j < 4; ++j) CHECK(fast.data()[j] == 0.0);

  ad::GradCheckOptions opt;
  opt.max_entries_per_leaf = 80;
  const auto r = ad::gradient_check([&] { return probe(ad::causal_attention(q, k, v, allowed)); }, {q, k, v}, opt);
  CHECK(r.max_rel_error <= 1e-4);

  allowed[1] = 1;
  CHECK_THROWS_AS(ad::causal_attention(q, k, v, allowed), melon::ShapeError);
}

TEST_CASE("non-scalar backward is rejected") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(ad::mul(x, x).backward(), melon::ShapeError);
}

TEST_CASE("shape mismatch error names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 5});
  try {
    ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const melon::ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
}

TEST_CASE("adam first step moves by lr") {
  auto p = Tensor<double>::from({1}, {0.0}, true);
  ad::Adam<double> opt({p}, {1e-3});
  ad::sum(p).backward();
  opt.step();
  CHECK(p.data()[0] == doctest::Approx(-1e-3 / (1.0 + 1e-8)).epsilon(1e-12));
  CHECK(opt.steps() == 1);
}

TEST_CASE("adam leaves parameters unchanged under zero gradient") {
  auto p = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  ad::Adam<double> opt({p}, {1e-3});
  for (int i = 0; i < 5; ++i) {
    ad::sum(ad::scale(p, 0.0)).backward();
    opt.step();
    opt.zero_grad();
  }
  CHECK(p.data()[0] == 1.0);
  CHECK(p.data()[1] == -2.0);
  CHECK(p.data()[2] == 0.5);
}

TEST_CASE("adam runs are bitwise reproducible") {
  auto run = [] {
    auto w = randn<float>({4, 3}, 11);
    auto x = randn<float>({5, 4}, 12, 1.0, false);
    ad::Adam<float> opt({w}, {1e-2});
    for (int i = 0; i < 10; ++i) {
      opt.zero_grad();
      ad::mean(ad::mul(ad::matmul(x, w), ad::matmul(x, w))).backward();
      opt.step();
    }
    return std::vector<float>(w.data().begin(), w.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("gradient check of sum of sines") {
  auto x = randn({10}, 5);
  const double err = ad::gradient_check([](const Tensor<double>& v) { return ad::sum(ad::sin(v)); }, x);
  CHECK(err <= 1e-7);
}

TEST_CASE("gradient check skips relu kinks") {
  auto x = Tensor<double>::from({4}, {-1.0, 0.0, 0.5, 2.0}, true);
  auto r = ad::gradient_check([&] { return ad::sum(ad::relu(x)); }, {x});
  CHECK(r.kinks_skipped == 1);
  CHECK(r.checked == 3);
  CHECK(r.max_rel_error <= 1e-8);
}

TEST_CASE("gradient check of a constant function") {
  auto x = randn({3}, 6);
  auto r = ad::gradient_check([&] { return Tensor<double>::scalar(4.0); }, {x});
  CHECK(r.max_rel_error == 0.0);
  CHECK(r.checked == 3);
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("every primitive passes the gradient check") {
  const double tol = 1e-4;
  auto a = randn({3, 4}, 1), b = randn({3, 4}, 2), row = randn({4}, 3), col = randn({3, 1}, 4);
  auto pos = testutil::uniform({3, 4}, 5, 0.5, 2.0);

  SUBCASE("elementwise and broadcasting") {
    CHECK(check([&] { return probe(ad::add(a, row)); }, {a, row}) <= tol);
    CHECK(check([&] { return probe(ad::sub(col, a)); }, {a, col}) <= tol);
    CHECK(check([&] { return probe(ad::mul(a, b)); }, {a, b}) <= tol);
    CHECK(check([&] { return probe(ad::div(a, pos)); }, {a, pos}) <= tol);
    CHECK(check([&] { return probe(ad::scale(a, 1.7)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::add_scalar(ad::neg(a), 0.3)); }, {a}) <= tol);
  }
  SUBCASE("unary") {
    CHECK(check([&] { return probe(ad::exp(a)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::log(pos)); }, {pos}) <= tol);
    CHECK(check([&] { return probe(ad::sqrt(pos)); }, {pos}) <= tol);
    CHECK(check([&] { return probe(ad::sin(a)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::sigmoid(a)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::silu(a)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::relu(a)); }, {a}) <= tol);
  }
  SUBCASE("matmul variants") {
    auto m = randn({4, 2}, 7), mt = randn({2, 4}, 8), at = randn({4, 3}, 9);
    auto b3 = randn({2, 3, 4}, 10), c3 = randn({2, 4, 5}, 11), d3 = randn({2, 5, 4}, 12);
    CHECK(check([&] { return probe(ad::matmul(a, m)); }, {a, m}) <= tol);
    CHECK(check([&] { return probe(ad::matmul(a, mt, false, true)); }, {a, mt}) <= tol);
    CHECK(check([&] { return probe(ad::matmul_rows(a, mt)); }, {a, mt}) <= tol);
    CHECK(check([&] { return probe(ad::matmul(at, m, true, false)); }, {at, m}) <= tol);
    CHECK(check([&] { return probe(ad::matmul(b3, c3)); }, {b3, c3}) <= tol);
    CHECK(check([&] { return probe(ad::matmul(b3, d3, false, true)); }, {b3, d3}) <= tol);
    CHECK(check([&] { return probe(ad::matmul(b3, m)); }, {b3, m}) <= tol);
  }
  SUBCASE("layout") {
    auto t3 = randn({2, 3, 4}, 13);
    CHECK(check([&] { return probe(ad::transpose(a)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::permute(t3, {2, 0, 1})); }, {t3}) <= tol);
    CHECK(check([&] { return probe(ad::reshape(a, {2, 6})); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::slice(t3, 1, 1, 3)); }, {t3}) <= tol);
    CHECK(check([&] { return probe(ad::concat<double>({a, b}, 1)); }, {a, b}) <= tol);
    CHECK(check([&] { return probe(ad::concat<double>({a, b}, 0)); }, {a, b}) <= tol);
  }
  SUBCASE("reductions and softmax") {
    CHECK(check([&] { return ad::sum(ad::mul(ad::sum(a, 0), row)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::mean(a, 1, true)); }, {a}) <= tol);
    CHECK(check([&] { return ad::mean(ad::mul(a, b)); }, {a, b}) <= tol);
    CHECK(check([&] { return probe(ad::softmax(a)); }, {a}) <= tol);
    const std::vector<std::uint8_t> allowed{1, 0, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(check([&] { return probe(ad::masked_softmax(a, allowed)); }, {a}) <= tol);
    CHECK(check([&] { return probe(ad::dropout(a, 0.4, 17)); }, {a}) <= tol);
  }
  SUBCASE("spatial") {
    auto x = randn({2, 6, 5}, 14), w = randn({3, 2, 3, 3}, 15), bias = randn({3}, 16);
    CHECK(check([&] { return probe(ad::conv2d(x, w, bias, 2, 1)); }, {x, w, bias}) <= tol);
    CHECK(check([&] { return probe(ad::conv2d(x, w, Tensor<double>(), 1, 0)); }, {x, w}) <= tol);
    CHECK(check([&] { return probe(ad::max_pool2d(x, 2, 2)); }, {x}) <= tol);
    CHECK(check([&] { return probe(ad::avg_pool2d(x, 2, 1)); }, {x}) <= tol);
    CHECK(check([&] { return probe(ad::global_avg_pool(x)); }, {x}) <= tol);
    CHECK(check([&] { return probe(ad::resize_bilinear(x, 9, 4)); }, {x}) <= tol);
  }
  SUBCASE("indexing") {
    auto table = randn({5, 3}, 18);
    const std::vector<std::size_t> ids{4, 0, 4, 2};
    CHECK(check([&] { return probe(ad::embedding(table, ids)); }, {table}) <= tol);
    CHECK(check([&] { return probe(ad::gather_rows(table, ids)); }, {table}) <= tol);
    auto src = randn({4, 3}, 19);
    CHECK(check([&] { return probe(ad::scatter_rows(src, ids, 6)); }, {src}) <= tol);
  }
  SUBCASE("normalisation and rotary") {
    auto g = randn({4}, 20);
    CHECK(check([&] { return probe(ad::rms_norm(a, g)); }, {a, g}) <= tol);
    auto x = randn({4, 3, 3}, 21), gain = randn({4}, 22), bias = randn({4}, 23);
    CHECK(check([&] { return probe(ad::group_norm(x, 2, gain, bias)); }, {x, gain, bias}) <= tol);
    auto q = randn({2, 5, 4}, 24);
    CHECK(check([&] { return probe(ad::rotary(q, 100.0)); }, {q}) <= tol);
  }
  SUBCASE("losses") {
    auto p = testutil::uniform({6}, 25, 0.05, 0.95), logits = randn({6}, 26);
    const std::vector<double> y{1, 0, 0, 1, 1, 0}, w{0.5, 1, 2, 1, 1, 3};
    CHECK(check([&] { return ad::binary_cross_entropy(p, std::span<const double>(y)); }, {p}) <= tol);
    CHECK(check([&] {
            return ad::binary_cross_entropy(p, std::span<const double>(y), std::span<const double>(w),
                                            ad::Reduction::sum);
          },
          {p}) <= tol);
    CHECK(check([&] { return ad::binary_cross_entropy_with_logits(logits, std::span<const double>(y)); },
                {logits}) <= tol);
    CHECK(check([&] { return ad::mse(logits, std::span<const double>(y)); }, {logits}) <= tol);
  }
}

TEST_CASE("softmax rows are normalised and shift invariant") {
  auto z = randn<double>({16, 7}, 31, 3.0, false);
  auto p = ad::softmax(z);
  auto q = ad::softmax(ad::add_scalar(z, 12.5));
  for (std::size_t r = 0; r < 16; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      s += p.data()[r * 7 + c];
      CHECK(std::abs(p.data()[r * 7 + c] - q.data()[r * 7 + c]) <= 1e-6);
    }
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
}

TEST_CASE("dropout conventions") {
  auto x = Tensor<float>::full({100000}, 1.0f);
  auto same = ad::dropout(x, 0.0, 1);
  for (std::size_t i = 0; i < 100; ++i) CHECK(same.data()[i] == 1.0f);

  auto d1 = ad::dropout(x, 0.3, 42), d2 = ad::dropout(x, 0.3, 42), d3 = ad::dropout(x, 0.3, 43);
  CHECK(std::equal(d1.data().begin(), d1.data().end(), d2.data().begin()));
  CHECK_FALSE(std::equal(d1.data().begin(), d1.data().end(), d3.data().begin()));

  // Each kept entry is 1/(1-p); the mean of n draws has sd sqrt(p / ((1-p) n)).
  const double p = 0.3, n = 1e5;
  const double mean = std::accumulate(d1.data().begin(), d1.data().end(), 0.0) / n;
  CHECK(std::abs(mean - 1.0) <= 3.0 * std::sqrt(p / ((1.0 - p) * n)));
}

TEST_CASE("conv2d matches a nested-loop reference") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const std::size_t stride = 1 + seed % 2, pad = seed / 2;
    auto x = randn<float>({3, 8, 8}, 100 + seed, 1.0, false);
    auto w = randn<float>({4, 3, 3, 3}, 200 + seed, 1.0, false);
    auto b = randn<float>({4}, 300 + seed, 1.0, false);
    auto y = ad::conv2d(x, w, b, stride, pad);
    std::size_t oh = 0, ow = 0;
    auto ref = conv_reference({x.data().begin(), x.data().end()}, 3, 8, 8, {w.data().begin(), w.data().end()},
                              4, 3, 3, {b.data().begin(), b.data().end()}, stride, pad, oh, ow);
    REQUIRE(y.shape() == ad::Shape{4, oh, ow});
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.data()[i] - ref[i]) <= 1e-5);
  }
}

TEST_CASE("no-grad mode records nothing") {
  auto x = randn({3}, 40);
  Tensor<double> y;
  {
    ad::NoGrad guard;
    y = ad::sum(ad::exp(x));
  }
  CHECK(y.node()->is_leaf());
  CHECK(ad::grad_enabled());
}
