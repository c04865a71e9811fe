#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "melon/ingest.hpp"
#include "melon/types.hpp"

namespace melon {

// (wins + 0.5 ties) / (n_pos * n_neg). Throws UndefinedMetricError when
// either class is absent.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct ScoredWindow {
  std::string patient_id;
  double window_start = 0.0;
  MobilityClass label = MobilityClass::CompletelyImmobile;
  std::array<double, kNumClasses> scores{};
};

// One-vs-rest AUROC for a class; nullopt when the class is absent or is the only one.
std::optional<double> class_auroc(std::span<const ScoredWindow> windows, MobilityClass cls);
// Mean of the defined one-vs-rest AUROCs; nullopt when none is defined.
std::optional<double> macro_auroc(std::span<const ScoredWindow> windows);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t used = 0;  // non-degenerate resamples
};

struct BootstrapOptions {
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
  double level = 0.95;
};

// AUROC of each patient-level resample: one-vs-rest for `cls`, macro when
// `cls` is empty. Degenerate resamples are skipped. Resample r draws from
// its own seed, so the result does not depend on evaluation order.
std::vector<double> bootstrap_aurocs(std::span<const ScoredWindow> windows, std::optional<MobilityClass> cls,
                                     const BootstrapOptions& opt);
// Percentile interval of bootstrap_aurocs with linear interpolation.
Interval bootstrap_ci(std::span<const ScoredWindow> windows, std::optional<MobilityClass> cls,
                      const BootstrapOptions& opt = {});

// Linear-interpolated quantile of unsorted data, q in [0, 1].
double quantile(std::vector<double> values, double q);

enum class WilcoxonMode { automatic, exact, normal };

struct RankSumResult {
  double u = 0.0;  // Mann-Whitney U of the first sample
  double p = 1.0;  // two-sided
  bool exact = false;
};

inline constexpr std::size_t kExactRankSumLimit = 12;

// Midranks for ties; exact permutation distribution when n_a + n_b <= 12 in
// automatic mode, else a normal approximation with tie and continuity correction.
RankSumResult wilcoxon_rank_sum(std::span<const double> a, std::span<const double> b,
                                WilcoxonMode mode = WilcoxonMode::automatic);

struct KruskalResult {
  double h = 0.0;
  double p = 1.0;
  std::size_t df = 0;
};

// Tie-corrected H with a chi-square upper-tail p-value.
KruskalResult kruskal_wallis(std::span<const std::vector<double>> groups);

// Midranks (1-based) of the pooled values.
std::vector<double> midranks(std::span<const double> values);

struct ClassMetric {
  std::optional<double> auroc;  // empty when undefined on this set
  double lo = 0.0;
  double hi = 0.0;
};

struct EvalReport {
  std::array<ClassMetric, kNumClasses> classes;
  ClassMetric overall;
  std::size_t windows = 0;
  std::size_t patients = 0;
  std::uint64_t seed = 0;
  std::size_t resamples = 0;
  std::vector<std::string> warnings;

  bool flagged() const;  // some class is undefined
};

EvalReport evaluate_scores(std::span<const ScoredWindow> windows, const BootstrapOptions& opt = {});

void write_report_json(const std::filesystem::path& path, const EvalReport& report);
EvalReport load_report_json(const std::filesystem::path& path);
void print_report(std::ostream& os, const EvalReport& report, const std::string& title = "");

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoredWindow> windows);
std::vector<ScoredWindow> read_scores_csv(const std::filesystem::path& path);

// Mean absolute deviation from a centred 60 s moving average, per axis, over
// valid samples. Empty when the window has no valid sample.
std::optional<std::array<double, 3>> activity_counts(const LabeledWindow& window);

// Multinomial logistic regression on standardized activity counts.
class ActivityBaseline {
 public:
  struct Options {
    std::size_t iterations = 2000;
    double lr = 0.5;
    double l2 = 1e-4;
  };

  static ActivityBaseline fit(std::span<const std::array<double, 3>> features,
                              std::span<const MobilityClass> labels, const Options& opt);
  static ActivityBaseline fit(std::span<const std::array<double, 3>> features,
                              std::span<const MobilityClass> labels) {
    return fit(features, labels, Options{});
  }
  std::array<double, kNumClasses> predict(const std::array<double, 3>& feature) const;

  std::array<double, 3> mean{}, scale{1.0, 1.0, 1.0};
  std::array<std::array<double, 4>, kNumClasses> weights{};  // [class][bias, x, y, z]
};

struct BaselineWindow {
  std::string patient_id;
  double window_start = 0.0;
  MobilityClass label = MobilityClass::CompletelyImmobile;
  std::optional<std::array<double, 3>> counts;
};

// Fits on `train`, scores `test`; windows without counts are dropped with a warning.
EvalReport activity_counts_baseline(std::span<const BaselineWindow> train, std::span<const BaselineWindow> test,
                                    const BootstrapOptions& opt = {},
                                    std::vector<ScoredWindow>* scored = nullptr);

struct GroupSummary {
  std::string group;
  std::size_t n = 0;
  double median = 0.0;
  double q1 = 0.0;
  double q3 = 0.0;
};

struct BrainStatusAnalysis {
  std::vector<GroupSummary> groups;  // normal, delirium, coma order, non-empty only
  KruskalResult test;
};

// Input CSV: patient_id,braden_mobility,brain_status with status in
// {normal, delirium, coma}.
BrainStatusAnalysis brain_status_analysis(const std::filesystem::path& csv);

}  // namespace melon
