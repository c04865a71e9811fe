#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <boost/math/special_functions/gamma.hpp>

#include "melon/eval_stats.hpp"
#include "melon/nn.hpp"

namespace melon {

namespace {

// Sum over tie groups of t^3 - t.
double tie_term(std::span<const double> values) {
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    while (j < v.size() && v[j] == v[i]) ++j;
    const double t = static_cast<double>(j - i);
    s += t * t * t - t;
    i = j;
  }
  return s;
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw ConfigError("auroc: scores and labels differ in length");
  for (double s : scores)
    if (!std::isfinite(s)) throw DataError("auroc: non-finite score");
  const auto ranks = midranks(scores);
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      rank_sum += ranks[i];
      ++pos;
    }
  }
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc needs both positive and negative labels");
  const double np = static_cast<double>(pos), nn = static_cast<double>(neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

std::optional<double> class_auroc(std::span<const ScoredWindow> windows, MobilityClass cls) {
  std::vector<double> s;
  std::vector<std::uint8_t> y;
  s.reserve(windows.size());
  y.reserve(windows.size());
  std::size_t pos = 0;
  for (const auto& w : windows) {
    s.push_back(w.scores[class_index(cls)]);
    y.push_back(w.label == cls);
    pos += w.label == cls;
  }
  if (pos == 0 || pos == windows.size()) return std::nullopt;
  return auroc(s, y);
}

std::optional<double> macro_auroc(std::span<const ScoredWindow> windows) {
  double sum = 0.0;
  int n = 0;
  for (int c = 1; c <= 4; ++c) {
    if (auto a = class_auroc(windows, static_cast<MobilityClass>(c))) {
      sum += *a;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw UndefinedMetricError("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<double> bootstrap_aurocs(std::span<const ScoredWindow> windows, std::optional<MobilityClass> cls,
                                     const BootstrapOptions& opt) {
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < windows.size(); ++i) by_patient[windows[i].patient_id].push_back(i);
  if (by_patient.size() < 2) throw DataError("bootstrap needs at least 2 patients");
  std::vector<const std::vector<std::size_t>*> patients;
  for (const auto& [id, idx] : by_patient) patients.push_back(&idx);

  std::vector<double> out;
  out.reserve(opt.resamples);
  std::vector<ScoredWindow> sample;
  for (std::size_t r = 0; r < opt.resamples; ++r) {
    std::mt19937_64 rng(nn::mix_seed(opt.seed, r));
    std::uniform_int_distribution<std::size_t> pick(0, patients.size() - 1);
    sample.clear();
    for (std::size_t k = 0; k < patients.size(); ++k)
      for (std::size_t i : *patients[pick(rng)]) sample.push_back(windows[i]);
    const auto a = cls ? class_auroc(sample, *cls) : macro_auroc(sample);
    if (a) out.push_back(*a);
  }
  return out;
}

Interval bootstrap_ci(std::span<const ScoredWindow> windows, std::optional<MobilityClass> cls,
                      const BootstrapOptions& opt) {
  if (opt.resamples == 0) throw ConfigError("bootstrap needs at least one resample");
  const auto values = bootstrap_aurocs(windows, cls, opt);
  if (values.empty()) throw UndefinedMetricError("every bootstrap resample was degenerate");
  const double tail = (1.0 - opt.level) / 2.0;
  return {quantile(values, tail), quantile(values, 1.0 - tail), values.size()};
}

RankSumResult wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b, WilcoxonMode mode) {
  if (a.empty() || b.empty()) throw ConfigError("rank-sum test needs two nonempty samples");
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto ranks = midranks(pooled);
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;
  const double ra = std::accumulate(ranks.begin(), ranks.begin() + static_cast<long>(na), 0.0);
  const double dna = static_cast<double>(na), dnb = static_cast<double>(nb);

  RankSumResult res;
  res.u = ra - dna * (dna + 1.0) / 2.0;
  const double mean = dna * dnb / 2.0;
  const bool exact = mode == WilcoxonMode::exact || (mode == WilcoxonMode::automatic && n <= kExactRankSumLimit);

  if (exact) {
    // Doubled midranks are integers; count size-na subsets by doubled rank sum.
    if (n > 40) throw ConfigError("exact rank-sum test is limited to 40 observations");
    std::vector<std::size_t> twice(n);
    std::size_t total = 0;
    for (std::size_t i = 0; i < n; ++i) total += twice[i] = static_cast<std::size_t>(std::lround(2.0 * ranks[i]));
    // ways[k][s]: subsets of size k with doubled sum s.
    std::vector<std::vector<double>> ways(na + 1, std::vector<double>(total + 1, 0.0));
    ways[0][0] = 1.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = std::min(i + 1, na); k >= 1; --k)
        for (std::size_t s = total; s >= twice[i]; --s) {
          ways[k][s] += ways[k - 1][s - twice[i]];
          if (s == twice[i]) break;
        }
    const double obs = std::abs(res.u - mean);
    double hit = 0.0, all = 0.0;
    const double offset = dna * (dna + 1.0) / 2.0;
    for (std::size_t s = 0; s <= total; ++s) {
      if (ways[na][s] == 0.0) continue;
      const double u = static_cast<double>(s) / 2.0 - offset;
      all += ways[na][s];
      if (std::abs(u - mean) >= obs - 1e-9) hit += ways[na][s];
    }
    res.p = std::min(1.0, hit / all);
    res.exact = true;
    return res;
  }

  const double dn = static_cast<double>(n);
  const double var = dna * dnb / 12.0 * ((dn + 1.0) - tie_term(pooled) / (dn * (dn - 1.0)));
  if (var <= 0.0) {
    res.p = 1.0;
    return res;
  }
  const double z = std::max(0.0, std::abs(res.u - mean) - 0.5) / std::sqrt(var);
  res.p = std::min(1.0, 2.0 * normal_sf(z));
  return res;
}

KruskalResult kruskal_wallis(std::span<const std::vector<double>> groups) {
  if (groups.size() < 2) throw ConfigError("Kruskal-Wallis needs at least 2 groups");
  std::vector<double> pooled;
  for (const auto& g : groups) {
    if (g.empty()) throw DataError("Kruskal-Wallis group is empty");
    pooled.insert(pooled.end(), g.begin(), g.end());
  }
  if (pooled.size() < 3) throw DataError("Kruskal-Wallis needs at least 3 observations");
  const auto ranks = midranks(pooled);
  const double n = static_cast<double>(pooled.size());
  double s = 0.0;
  std::size_t offset = 0;
  for (const auto& g : groups) {
    double r = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) r += ranks[offset + i];
    s += r * r / static_cast<double>(g.size());
    offset += g.size();
  }
  KruskalResult res;
  res.df = groups.size() - 1;
  const double correction = 1.0 - tie_term(pooled) / (n * n * n - n);
  if (correction <= 0.0) return res;  // every value tied: H = 0, p = 1
  res.h = std::max(0.0, (12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction);
  res.p = res.h == 0.0 ? 1.0 : boost::math::gamma_q(static_cast<double>(res.df) / 2.0, res.h / 2.0);
  return res;
}

}  // namespace melon
