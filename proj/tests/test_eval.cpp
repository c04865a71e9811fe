#include <doctest.h>

#include <unistd.h>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "melon/eval_stats.hpp"

namespace fs = std::filesystem;
using namespace melon;

namespace {

// Pair counting over every positive/negative pair.
double brute_auroc(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return wins / pairs;
}

// U of the first sample counted pairwise.
double pair_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

// Two-sided p by enumerating every relabelling of the pooled sample.
double enumerated_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t n = pooled.size(), na = a.size();
  const double mean = double(na) * double(b.size()) / 2.0, obs = std::abs(pair_u(a, b) - mean);
  double hit = 0.0, all = 0.0;
  for (std::uint32_t m = 0; m < (1u << n); ++m) {
    if (std::popcount(m) != static_cast<int>(na)) continue;
    std::vector<double> x, y;
    for (std::size_t i = 0; i < n; ++i) ((m >> i) & 1u ? x : y).push_back(pooled[i]);
    all += 1.0;
    if (std::abs(pair_u(x, y) - mean) >= obs - 1e-9) hit += 1.0;
  }
  return hit / all;
}

std::vector<ScoredWindow> fixture(std::size_t patients, std::uint64_t seed, double signal = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<ScoredWindow> out;
  for (std::size_t p = 0; p < patients; ++p) {
    const auto cls = static_cast<MobilityClass>(1 + p % 4);
    for (int w = 0; w < 3; ++w) {
      ScoredWindow sw{"P" + std::to_string(p), 43200.0 * w, cls, {}};
      for (std::size_t k = 0; k < 4; ++k)
        sw.scores[k] = 1.0 / (1.0 + std::exp(-(nd(rng) + (k == class_index(cls) ? signal : 0.0))));
      out.push_back(sw);
    }
  }
  return out;
}

fs::path temp_path(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("melon_eval_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("auroc examples") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<std::uint8_t> y{0, 0, 1, 1};
  CHECK(brute_auroc(s, y) == 0.75);
  CHECK(auroc(s, y) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, y) == 1.0);
  CHECK(auroc(std::vector<double>(4, 0.3), y) == 0.5);
  CHECK_THROWS_AS(auroc(s, std::vector<std::uint8_t>(4, 1)), UndefinedMetricError);
}

TEST_CASE("auroc equals pair counting on random instances") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> len(2, 30), level(0, 9);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = len(rng);
    std::vector<double> s(n);
    std::vector<std::uint8_t> y(n);
    for (int i = 0; i < n; ++i) {
      s[i] = level(rng) / 10.0;  // coarse levels force ties
      y[i] = level(rng) < 5;
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(auroc(s, y) - brute_auroc(s, y)));
    // Strictly monotone transform.
    std::vector<double> t(s);
    for (auto& v : t) v = std::exp(3.0 * v) - 7.0;
    CHECK(auroc(t, y) == auroc(s, y));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("midranks and quantiles") {
  const std::vector<double> v{3.0, 1.0, 3.0, 2.0};
  CHECK(midranks(v) == std::vector<double>{3.5, 1.0, 3.5, 2.0});
  CHECK(quantile({1.0, 2.0, 3.0, 4.0}, 0.5) == 2.5);
  CHECK(quantile({4.0, 1.0}, 0.25) == 1.75);
  CHECK(quantile({5.0}, 0.975) == 5.0);
}

TEST_CASE("bootstrap interval") {
  const auto windows = fixture(20, 2);
  BootstrapOptions opt;
  opt.resamples = 300;
  opt.seed = 5;
  const auto a = bootstrap_ci(windows, std::nullopt, opt), b = bootstrap_ci(windows, std::nullopt, opt);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  const double point = *macro_auroc(windows);
  CHECK(a.lo <= point);
  CHECK(point <= a.hi);
  CHECK(a.used == 300);

  opt.resamples = 1;
  const auto one = bootstrap_ci(windows, MobilityClass::VeryLimited, opt);
  CHECK(one.lo == one.hi);

  // Resample r uses its own seed, so the first draws agree across lengths.
  opt.resamples = 50;
  auto short_run = bootstrap_aurocs(windows, std::nullopt, opt);
  opt.resamples = 80;
  auto long_run = bootstrap_aurocs(windows, std::nullopt, opt);
  CHECK(std::equal(short_run.begin(), short_run.end(), long_run.begin()));

  const std::vector<ScoredWindow> single(windows.begin(), windows.begin() + 3);
  CHECK_THROWS_AS(bootstrap_ci(single, std::nullopt, opt), DataError);
}

TEST_CASE("bootstrap width shrinks with more patients") {
  auto median_width = [](std::size_t patients) {
    std::vector<double> widths;
    for (std::uint64_t s = 0; s < 20; ++s) {
      BootstrapOptions opt;
      opt.resamples = 200;
      opt.seed = s;
      const auto ci = bootstrap_ci(fixture(patients, 100 + s), std::nullopt, opt);
      widths.push_back(ci.hi - ci.lo);
    }
    return quantile(widths, 0.5);
  };
  CHECK(median_width(40) < median_width(10));
}

TEST_CASE("wilcoxon rank-sum examples") {
  const std::vector<double> a{1, 2}, b{3, 4};
  auto r = wilcoxon_rank_sum(a, b);
  CHECK(r.exact);
  CHECK(r.u == 0.0);
  CHECK(r.p == doctest::Approx(2.0 / 6.0).epsilon(1e-12));
  CHECK(enumerated_p(a, b) == doctest::Approx(2.0 / 6.0).epsilon(1e-12));

  const std::vector<double> same{0.4, 0.7, 0.9};
  CHECK(wilcoxon_rank_sum(same, same).p == 1.0);
  CHECK_THROWS_AS(wilcoxon_rank_sum(std::vector<double>{}, b), ConfigError);
}

TEST_CASE("exact rank-sum test matches full enumeration") {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> size(1, 6), level(0, 6);
  for (int trial = 0; trial < 120; ++trial) {
    std::vector<double> a(size(rng)), b(size(rng));
    for (auto& v : a) v = level(rng);
    for (auto& v : b) v = level(rng) + 0.5 * (trial % 2);
    const auto r = wilcoxon_rank_sum(a, b, WilcoxonMode::exact);
    CHECK(r.u == pair_u(a, b));
    CHECK(r.p == doctest::Approx(enumerated_p(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("normal approximation tracks the exact p at n = 12") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> a(6), b(6);
    const double shift = 0.3 * (trial % 5);
    for (auto& v : a) v = nd(rng);
    for (auto& v : b) v = nd(rng) + shift;
    const double exact = wilcoxon_rank_sum(a, b, WilcoxonMode::exact).p;
    const double approx = wilcoxon_rank_sum(a, b, WilcoxonMode::normal).p;
    worst = std::max(worst, std::abs(exact - approx));
  }
  CHECK(worst <= 0.02);
  std::vector<double> big(13, 1.0);
  CHECK_FALSE(wilcoxon_rank_sum(big, big).exact);
}

TEST_CASE("kruskal-wallis") {
  SUBCASE("identical groups") {
    const std::vector<std::vector<double>> g{{2, 2, 2}, {2, 2, 2}, {2, 2, 2}};
    auto r = kruskal_wallis(g);
    CHECK(r.h == 0.0);
    CHECK(r.p == 1.0);
  }
  SUBCASE("separated groups against hand ranking") {
    const std::vector<std::vector<double>> g{{1, 2}, {3, 4}, {5, 6}};
    // Rank sums 3, 7, 11 over N = 6.
    const double h = 12.0 / (6.0 * 7.0) * (9.0 / 2 + 49.0 / 2 + 121.0 / 2) - 3.0 * 7.0;
    auto r = kruskal_wallis(g);
    CHECK(r.df == 2);
    CHECK(r.h == doctest::Approx(h).epsilon(1e-12));
    CHECK(r.h == doctest::Approx(32.0 / 7.0).epsilon(1e-12));
    // Chi-square with two degrees of freedom has survival exp(-x / 2).
    CHECK(r.p == doctest::Approx(std::exp(-h / 2.0)).epsilon(1e-12));
  }
  SUBCASE("rank statistic ignores monotone transforms") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    std::vector<std::vector<double>> g(3, std::vector<double>(7));
    for (std::size_t i = 0; i < 3; ++i)
      for (auto& v : g[i]) v = std::round(4.0 * (nd(rng) + 0.5 * double(i))) / 4.0;
    auto scaled = g, warped = g;
    for (auto& grp : scaled)
      for (auto& v : grp) v *= 10.0;
    for (auto& grp : warped)
      for (auto& v : grp) v = std::exp(v);
    const auto r = kruskal_wallis(g), s = kruskal_wallis(scaled), w = kruskal_wallis(warped);
    CHECK(r.h == doctest::Approx(s.h).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(s.p).epsilon(1e-12));
    CHECK(r.h == doctest::Approx(w.h).epsilon(1e-12));
  }
  SUBCASE("tie correction against a direct computation") {
    const std::vector<std::vector<double>> g{{1, 1, 2}, {2, 3, 3}, {3, 4}};
    // Midranks: 1,1 -> 1.5; 2,2 -> 3.5; 3,3,3 -> 6; 4 -> 8.
    const double r1 = 1.5 + 1.5 + 3.5, r2 = 3.5 + 6 + 6, r3 = 6 + 8, n = 8;
    const double raw = 12.0 / (n * (n + 1)) * (r1 * r1 / 3 + r2 * r2 / 3 + r3 * r3 / 2) - 3 * (n + 1);
    const double ties = (8 - 2) + (8 - 2) + (27 - 3);
    CHECK(kruskal_wallis(g).h == doctest::Approx(raw / (1 - ties / (n * n * n - n))).epsilon(1e-12));
  }
  SUBCASE("errors") {
    const std::vector<std::vector<double>> empty_group{{1, 2}, {}};
    CHECK_THROWS_AS(kruskal_wallis(empty_group), DataError);
    const std::vector<std::vector<double>> tiny{{1}, {2}};
    CHECK_THROWS_AS(kruskal_wallis(tiny), DataError);
  }
}

TEST_CASE("evaluation report") {
  SUBCASE("rows, ordering and intervals") {
    const auto windows = fixture(24, 6, 2.0);
    BootstrapOptions opt;
    opt.resamples = 200;
    opt.seed = 1;
    const auto r = evaluate_scores(windows, opt);
    CHECK(r.windows == 72);
    CHECK(r.patients == 24);
    CHECK_FALSE(r.flagged());
    double sum = 0.0;
    for (const auto& c : r.classes) {
      REQUIRE(c.auroc.has_value());
      CHECK(c.lo <= *c.auroc);
      CHECK(*c.auroc <= c.hi);
      sum += *c.auroc;
    }
    CHECK(*r.overall.auroc == doctest::Approx(sum / 4.0).epsilon(1e-12));
    CHECK(*r.overall.auroc > 0.8);
  }
  SUBCASE("random scores sit near one half") {
    const auto r = evaluate_scores(fixture(200, 7, 0.0), {100, 1});
    CHECK(*r.overall.auroc == doctest::Approx(0.5).epsilon(0.1));
  }
  SUBCASE("single-class set is flagged, not fatal") {
    auto windows = fixture(8, 8);
    for (auto& w : windows) w.label = MobilityClass::SlightlyLimited;
    const auto r = evaluate_scores(windows, {50, 1});
    CHECK(r.flagged());
    CHECK_FALSE(r.overall.auroc.has_value());
    CHECK_FALSE(r.warnings.empty());
  }
  SUBCASE("missing class is excluded from the macro average") {
    auto windows = fixture(16, 9, 1.5);
    std::erase_if(windows, [](const ScoredWindow& w) { return w.label == MobilityClass::NoLimitation; });
    const auto r = evaluate_scores(windows, {50, 1});
    CHECK(r.flagged());
    CHECK_FALSE(r.classes[3].auroc.has_value());
    const double mean3 = (*r.classes[0].auroc + *r.classes[1].auroc + *r.classes[2].auroc) / 3.0;
    CHECK(*r.overall.auroc == doctest::Approx(mean3).epsilon(1e-12));
  }
}

TEST_CASE("scores and report files round-trip") {
  const auto windows = fixture(6, 10);
  const auto scores = temp_path("scores.csv");
  write_scores_csv(scores, windows);
  const auto back = read_scores_csv(scores);
  REQUIRE(back.size() == windows.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].patient_id == windows[i].patient_id);
    CHECK(back[i].label == windows[i].label);
    CHECK(back[i].scores == windows[i].scores);
  }
  const auto r = evaluate_scores(windows, {40, 3});
  const auto report = temp_path("report.json");
  write_report_json(report, r);
  const auto rb = load_report_json(report);
  CHECK(rb.overall.auroc == r.overall.auroc);
  CHECK(rb.overall.lo == r.overall.lo);
  CHECK(rb.classes[2].hi == r.classes[2].hi);
  CHECK(rb.seed == 3);
  fs::remove_all(scores.parent_path());
}

TEST_CASE("activity counts") {
  SUBCASE("direct moving-average oracle") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> nd;
    LabeledWindow w;
    const std::size_t n = 3000;
    w.samples.resize(n);
    w.valid.assign(n, 1);
    for (auto& s : w.samples) s = {nd(rng), 0.5 * nd(rng), 1.0 + 0.1 * nd(rng)};
    for (std::size_t i = 1000; i < 1400; ++i) w.valid[i] = 0;
    const auto got = activity_counts(w);
    REQUIRE(got.has_value());
    CHECK(got->size() == 3);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      double total = 0.0, count = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (!w.valid[i]) continue;
        double s = 0.0, c = 0.0;
        for (std::size_t j = (i >= 600 ? i - 600 : 0); j < std::min(n, i + 600); ++j)
          if (w.valid[j]) s += w.samples[j][axis], c += 1.0;
        total += std::abs(w.samples[i][axis] - s / c);
        count += 1.0;
      }
      CHECK((*got)[axis] == doctest::Approx(total / count).epsilon(1e-9));
    }
  }
  SUBCASE("no valid sample") {
    LabeledWindow w;
    w.samples.assign(100, Vec3{0, 0, 1});
    w.valid.assign(100, 0);
    CHECK_FALSE(activity_counts(w).has_value());
  }
}

TEST_CASE("activity baseline") {
  SUBCASE("zero-motion windows are uninformative") {
    std::vector<BaselineWindow> train, test;
    for (int p = 0; p < 16; ++p) {
      const auto cls = static_cast<MobilityClass>(1 + p % 4);
      BaselineWindow w{"P" + std::to_string(p), 0.0, cls, std::array<double, 3>{0.0, 0.0, 0.0}};
      (p < 8 ? train : test).push_back(w);
    }
    const auto r = activity_counts_baseline(train, test, {20, 1});
    for (const auto& c : r.classes) CHECK(*c.auroc == 0.5);
  }
  SUBCASE("recovers a monotone intensity signal and drops empty windows") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> nd(0.0, 0.05);
    std::vector<BaselineWindow> train, test;
    for (int p = 0; p < 80; ++p) {
      const auto cls = static_cast<MobilityClass>(1 + p % 4);
      const double level = 0.1 * static_cast<int>(cls);
      BaselineWindow w{"P" + std::to_string(p), 0.0, cls,
                       std::array<double, 3>{level + nd(rng), level + nd(rng), level + nd(rng)}};
      (p < 60 ? train : test).push_back(w);
    }
    test.push_back({"Q", 0.0, MobilityClass::VeryLimited, std::nullopt});
    std::vector<ScoredWindow> scored;
    const auto r = activity_counts_baseline(train, test, {50, 1}, &scored);
    CHECK(scored.size() == 20);
    CHECK(*r.overall.auroc > 0.9);
    CHECK_FALSE(r.warnings.empty());
  }
  SUBCASE("a patient in both sets is rejected") {
    std::vector<BaselineWindow> a{{"P", 0.0, MobilityClass::VeryLimited, std::array<double, 3>{}}};
    CHECK_THROWS_AS(activity_counts_baseline(a, a), LeakageError);
  }
}

TEST_CASE("brain-status analysis") {
  const auto path = temp_path("brain.csv");
  std::ofstream(path) << "patient_id,braden_mobility,brain_status\n"
                         "a,4,normal\nb,3,normal\nc,4,normal\nd,2,delirium\ne,3,delirium\nf,1,coma\ng,1,coma\nh,2,coma\n";
  const auto res = brain_status_analysis(path);
  REQUIRE(res.groups.size() == 3);
  CHECK(res.groups[0].group == "normal");
  CHECK(res.groups[0].median == 4.0);
  CHECK(res.groups[1].median == 2.5);
  CHECK(res.groups[2].median == 1.0);
  CHECK(res.groups[2].q3 == 1.5);
  const std::vector<std::vector<double>> g{{4, 3, 4}, {2, 3}, {1, 1, 2}};
  CHECK(res.test.h == kruskal_wallis(g).h);

  std::ofstream(path) << "patient_id,braden_mobility,brain_status\na,4,asleep\n";
  CHECK_THROWS_AS(brain_status_analysis(path), ParseError);
  fs::remove_all(path.parent_path());
}
