#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <set>

#include <json.hpp>

#include "../ingest/csv.hpp"
#include "melon/eval_stats.hpp"
#include "melon/nn.hpp"

namespace melon {

using nlohmann::json;

bool EvalReport::flagged() const {
  return std::any_of(classes.begin(), classes.end(), [](const ClassMetric& m) { return !m.auroc; });
}

namespace {

ClassMetric with_interval(std::span<const ScoredWindow> windows, std::optional<MobilityClass> cls,
                          std::optional<double> point, const BootstrapOptions& opt, std::size_t patients,
                          std::vector<std::string>& warnings, const std::string& what) {
  ClassMetric m;
  m.auroc = point;
  if (!point) return m;
  m.lo = m.hi = *point;
  if (patients < 2 || opt.resamples == 0) {
    warnings.push_back(what + ": fewer than 2 patients, no confidence interval");
    return m;
  }
  try {
    const auto ci = bootstrap_ci(windows, cls, opt);
    m.lo = ci.lo;
    m.hi = ci.hi;
  } catch (const UndefinedMetricError&) {
    warnings.push_back(what + ": every bootstrap resample was degenerate");
  }
  return m;
}

json metric_json(const ClassMetric& m) {
  json j;
  j["auroc"] = m.auroc ? json(*m.auroc) : json(nullptr);
  j["ci"] = m.auroc ? json::array({m.lo, m.hi}) : json(nullptr);
  return j;
}

ClassMetric metric_from(const json& j) {
  ClassMetric m;
  if (!j.at("auroc").is_null()) {
    m.auroc = j.at("auroc").get<double>();
    m.lo = j.at("ci").at(0).get<double>();
    m.hi = j.at("ci").at(1).get<double>();
  }
  return m;
}

}  // namespace

EvalReport evaluate_scores(std::span<const ScoredWindow> windows, const BootstrapOptions& opt) {
  if (windows.empty()) throw DataError("no windows to evaluate");
  for (const auto& w : windows)
    for (double s : w.scores)
      if (!std::isfinite(s)) throw DataError("non-finite score for patient " + w.patient_id);
  EvalReport r;
  r.windows = windows.size();
  std::set<std::string> ids;
  for (const auto& w : windows) ids.insert(w.patient_id);
  r.patients = ids.size();
  r.seed = opt.seed;
  r.resamples = opt.resamples;

  for (int c = 1; c <= 4; ++c) {
    const auto cls = static_cast<MobilityClass>(c);
    const auto point = class_auroc(windows, cls);
    const std::string name(mobility_name(cls));
    if (!point) r.warnings.push_back("class " + name + " has no positive or no negative windows; excluded from overall");
    // Each class gets its own bootstrap stream.
    BootstrapOptions o = opt;
    o.seed = nn::mix_seed(opt.seed, static_cast<std::uint64_t>(c));
    r.classes[class_index(cls)] = with_interval(windows, cls, point, o, r.patients, r.warnings, name);
  }
  r.overall = with_interval(windows, std::nullopt, macro_auroc(windows), opt, r.patients, r.warnings, "overall");
  return r;
}

void write_report_json(const std::filesystem::path& path, const EvalReport& r) {
  json classes = json::array();
  for (int c = 1; c <= 4; ++c) {
    const auto cls = static_cast<MobilityClass>(c);
    json j = metric_json(r.classes[class_index(cls)]);
    j["class"] = c;
    j["name"] = mobility_name(cls);
    classes.push_back(j);
  }
  json doc{{"classes", classes},      {"overall", metric_json(r.overall)}, {"n_windows", r.windows},
           {"n_patients", r.patients}, {"seed", r.seed},                   {"resamples", r.resamples},
           {"flagged", r.flagged()},   {"warnings", r.warnings}};
  auto out = csv::open_out(path);
  out << doc.dump(2) << '\n';
}

EvalReport load_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    const json doc = json::parse(in);
    EvalReport r;
    for (const auto& j : doc.at("classes")) r.classes[class_index(mobility_from_int(j.at("class").get<int>()))] = metric_from(j);
    r.overall = metric_from(doc.at("overall"));
    r.windows = doc.at("n_windows").get<std::size_t>();
    r.patients = doc.at("n_patients").get<std::size_t>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.resamples = doc.at("resamples").get<std::size_t>();
    r.warnings = doc.at("warnings").get<std::vector<std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed report: " + e.what());
  }
}

void print_report(std::ostream& os, const EvalReport& r, const std::string& title) {
  if (!title.empty()) os << title << '\n';
  auto row = [&](const std::string& name, const ClassMetric& m) {
    os << "  " << std::left << std::setw(22) << name;
    if (m.auroc) {
      os << std::fixed << std::setprecision(3) << *m.auroc << " (" << m.lo << "-" << m.hi << ")";
    } else {
      os << "undefined";
    }
    os << '\n';
  };
  for (int c = 1; c <= 4; ++c) {
    const auto cls = static_cast<MobilityClass>(c);
    row(std::to_string(c) + " " + std::string(mobility_name(cls)), r.classes[class_index(cls)]);
  }
  row("overall (macro)", r.overall);
  os << "  windows " << r.windows << ", patients " << r.patients << ", resamples " << r.resamples << ", seed "
     << r.seed << '\n';
  for (const auto& w : r.warnings) os << "  warning: " << w << '\n';
  os.unsetf(std::ios::floatfield);
}

void write_scores_csv(const std::filesystem::path& path, std::span<const ScoredWindow> windows) {
  auto out = csv::open_out(path);
  std::string buf = "patient_id,window_start,true_class,s1,s2,s3,s4\n";
  for (const auto& w : windows) {
    buf += w.patient_id;
    buf += ',';
    csv::append_double(buf, w.window_start);
    buf += ',';
    buf += std::to_string(static_cast<int>(w.label));
    for (double s : w.scores) {
      buf += ',';
      csv::append_double(buf, s);
    }
    buf += '\n';
  }
  out << buf;
}

std::vector<ScoredWindow> read_scores_csv(const std::filesystem::path& path) {
  csv::Reader reader(path, "patient_id,window_start,true_class,s1,s2,s3,s4");
  std::vector<std::string_view> cells;
  std::vector<ScoredWindow> out;
  while (reader.next(cells, 7)) {
    ScoredWindow w;
    w.patient_id = std::string(cells[0]);
    if (w.patient_id.empty()) throw ParseError("empty patient_id", reader.row());
    w.window_start = csv::parse_double(cells[1], "window_start", reader.row());
    const long c = csv::parse_int(cells[2], "true_class", reader.row());
    if (c < 1 || c > 4) throw ParseError("true_class must be 1..4", reader.row());
    w.label = static_cast<MobilityClass>(c);
    static constexpr const char* names[] = {"s1", "s2", "s3", "s4"};
    for (std::size_t k = 0; k < 4; ++k) w.scores[k] = csv::parse_double(cells[3 + k], names[k], reader.row());
    out.push_back(std::move(w));
  }
  return out;
}

std::optional<std::array<double, 3>> activity_counts(const LabeledWindow& window) {
  const std::size_t n = window.samples.size();
  if (window.valid.size() != n) throw ShapeError("window mask length differs from sample count");
  constexpr std::size_t half = 600;  // 30 s either side at 20 Hz
  std::vector<double> prefix(n + 1);
  std::vector<std::size_t> count(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) count[i + 1] = count[i] + (window.valid[i] ? 1 : 0);
  const std::size_t valid = count[n];
  if (valid == 0) return std::nullopt;

  std::array<double, 3> out{};
  for (std::size_t axis = 0; axis < 3; ++axis) {
    for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + (window.valid[i] ? window.samples[i][axis] : 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!window.valid[i]) continue;
      const std::size_t lo = i >= half ? i - half : 0, hi = std::min(n, i + half);
      const double avg = (prefix[hi] - prefix[lo]) / static_cast<double>(count[hi] - count[lo]);
      sum += std::abs(window.samples[i][axis] - avg);
    }
    out[axis] = sum / static_cast<double>(valid);
  }
  return out;
}

ActivityBaseline ActivityBaseline::fit(std::span<const std::array<double, 3>> features,
                                       std::span<const MobilityClass> labels, const Options& opt) {
  if (features.size() != labels.size()) throw ConfigError("baseline: features and labels differ in length");
  if (features.empty()) throw DataError("baseline: no training windows");
  ActivityBaseline m;
  const double n = static_cast<double>(features.size());
  for (std::size_t d = 0; d < 3; ++d) {
    double mu = 0.0, var = 0.0;
    for (const auto& f : features) mu += f[d];
    mu /= n;
    for (const auto& f : features) var += (f[d] - mu) * (f[d] - mu);
    var /= n;
    m.mean[d] = mu;
    m.scale[d] = var > 1e-24 ? std::sqrt(var) : 1.0;
  }
  std::vector<std::array<double, 4>> x(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) {
    x[i][0] = 1.0;
    for (std::size_t d = 0; d < 3; ++d) x[i][d + 1] = (features[i][d] - m.mean[d]) / m.scale[d];
  }
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    std::array<std::array<double, 4>, kNumClasses> grad{};
    for (std::size_t i = 0; i < x.size(); ++i) {
      std::array<double, kNumClasses> z{};
      for (std::size_t k = 0; k < kNumClasses; ++k)
        for (std::size_t d = 0; d < 4; ++d) z[k] += m.weights[k][d] * x[i][d];
      const double zmax = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (auto& v : z) total += v = std::exp(v - zmax);
      for (std::size_t k = 0; k < kNumClasses; ++k) {
        const double err = z[k] / total - (class_index(labels[i]) == k ? 1.0 : 0.0);
        for (std::size_t d = 0; d < 4; ++d) grad[k][d] += err * x[i][d];
      }
    }
    for (std::size_t k = 0; k < kNumClasses; ++k)
      for (std::size_t d = 0; d < 4; ++d) {
        const double reg = d == 0 ? 0.0 : opt.l2 * m.weights[k][d];
        m.weights[k][d] -= opt.lr * (grad[k][d] / n + reg);
      }
  }
  return m;
}

std::array<double, kNumClasses> ActivityBaseline::predict(const std::array<double, 3>& feature) const {
  std::array<double, kNumClasses> z{};
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    z[k] = weights[k][0];
    for (std::size_t d = 0; d < 3; ++d) z[k] += weights[k][d + 1] * (feature[d] - mean[d]) / scale[d];
  }
  const double zmax = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) total += v = std::exp(v - zmax);
  for (auto& v : z) v /= total;
  return z;
}

EvalReport activity_counts_baseline(std::span<const BaselineWindow> train, std::span<const BaselineWindow> test,
                                    const BootstrapOptions& opt, std::vector<ScoredWindow>* scored) {
  std::set<std::string> train_ids;
  for (const auto& w : train) train_ids.insert(w.patient_id);
  for (const auto& w : test)
    if (train_ids.count(w.patient_id)) throw LeakageError(w.patient_id);

  std::vector<std::string> warnings;
  std::vector<std::array<double, 3>> features;
  std::vector<MobilityClass> labels;
  std::size_t dropped = 0;
  for (const auto& w : train) {
    if (!w.counts) {
      ++dropped;
      continue;
    }
    features.push_back(*w.counts);
    labels.push_back(w.label);
  }
  const auto model = ActivityBaseline::fit(features, labels);

  std::vector<ScoredWindow> out;
  for (const auto& w : test) {
    if (!w.counts) {
      ++dropped;
      continue;
    }
    out.push_back({w.patient_id, w.window_start, w.label, model.predict(*w.counts)});
  }
  if (dropped) warnings.push_back(std::to_string(dropped) + " windows without valid samples dropped from the baseline");
  auto report = evaluate_scores(out, opt);
  report.warnings.insert(report.warnings.begin(), warnings.begin(), warnings.end());
  if (scored) *scored = std::move(out);
  return report;
}

BrainStatusAnalysis brain_status_analysis(const std::filesystem::path& path) {
  static constexpr std::array<std::string_view, 3> statuses{"normal", "delirium", "coma"};
  std::array<std::vector<double>, 3> values;
  csv::Reader reader(path, "patient_id,braden_mobility,brain_status");
  std::vector<std::string_view> cells;
  while (reader.next(cells, 3)) {
    const long m = csv::parse_int(cells[1], "braden_mobility", reader.row());
    if (m < 1 || m > 4) throw ParseError("braden_mobility must be 1..4", reader.row());
    const auto it = std::find(statuses.begin(), statuses.end(), cells[2]);
    if (it == statuses.end()) {
      throw ParseError("brain_status must be normal, delirium or coma, got '" + std::string(cells[2]) + "'",
                       reader.row());
    }
    values[static_cast<std::size_t>(it - statuses.begin())].push_back(static_cast<double>(m));
  }
  BrainStatusAnalysis res;
  std::vector<std::vector<double>> groups;
  for (std::size_t g = 0; g < 3; ++g) {
    if (values[g].empty()) continue;
    res.groups.push_back({std::string(statuses[g]), values[g].size(), quantile(values[g], 0.5),
                          quantile(values[g], 0.25), quantile(values[g], 0.75)});
    groups.push_back(values[g]);
  }
  res.test = kruskal_wallis(groups);
  return res;
}

}  // namespace melon
