#include "melon/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "csv.hpp"

namespace melon {

namespace fs = std::filesystem;
using nlohmann::json;

void RawRecording::validate() const {
  if (!(nominal_rate > 0.0)) throw DataError("recording " + patient_id + ": nominal rate must be positive");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (!std::isfinite(s.t) || !std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.z)) {
      throw DataError("recording " + patient_id + ": non-finite value at sample " + std::to_string(i));
    }
    if (i > 0 && !(s.t > samples[i - 1].t)) {
      throw OrderingError("recording " + patient_id + ": timestamps not strictly increasing at sample " +
                          std::to_string(i));
    }
  }
}

std::size_t LabeledWindow::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

fs::path sidecar_path(const fs::path& csv) {
  fs::path p = csv;
  p.replace_extension(".json");
  return p;
}

RawRecording load_recording(const fs::path& path, const RecordingDefaults& defaults) {
  RawRecording rec;
  rec.patient_id = defaults.patient_id.empty() ? path.stem().string() : defaults.patient_id;
  rec.site = defaults.site;

  const fs::path side = sidecar_path(path);
  if (fs::exists(side)) {
    std::ifstream in(side);
    json meta;
    try {
      meta = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
    if (meta.contains("patient_id")) rec.patient_id = meta.at("patient_id").get<std::string>();
    if (meta.contains("site")) rec.site = site_from_string(meta.at("site").get<std::string>());
    if (meta.contains("nominal_rate")) rec.nominal_rate = meta.at("nominal_rate").get<double>();
  }

  csv::Reader reader(path, "t,x,y,z");
  std::vector<std::string_view> cells;
  while (reader.next(cells, 4)) {
    const std::size_t row = reader.row();
    Sample s;
    s.t = csv::parse_double(cells[0], "t", row);
    s.x = csv::parse_double(cells[1], "x", row);
    s.y = csv::parse_double(cells[2], "y", row);
    s.z = csv::parse_double(cells[3], "z", row);
    if (!rec.samples.empty() && !(s.t > rec.samples.back().t)) {
      throw OrderingError(path.string() + ": timestamp " + std::string(cells[0]) +
                          " does not exceed the previous one (row " + std::to_string(row) + ")");
    }
    rec.samples.push_back(s);
  }
  if (!(rec.nominal_rate > 0.0)) throw DataError(side.string() + ": nominal_rate must be positive");
  return rec;
}

void write_recording(const fs::path& path, const RawRecording& rec) {
  rec.validate();
  auto out = csv::open_out(path);
  std::string buf = "t,x,y,z\n";
  buf.reserve(1 << 20);
  for (const auto& s : rec.samples) {
    csv::append_double(buf, s.t);
    buf += ',';
    csv::append_double(buf, s.x);
    buf += ',';
    csv::append_double(buf, s.y);
    buf += ',';
    csv::append_double(buf, s.z);
    buf += '\n';
    if (buf.size() > (1u << 20)) {
      out << buf;
      buf.clear();
    }
  }
  out << buf;
  if (!out) throw DataError("failed writing " + path.string());

  json meta{{"patient_id", rec.patient_id}, {"site", site_name(rec.site)}, {"nominal_rate", rec.nominal_rate}};
  auto side = csv::open_out(sidecar_path(path));
  side << meta.dump(2) << '\n';
}

std::vector<OffIntervalRow> load_off_intervals(const fs::path& path) {
  csv::Reader reader(path, "patient_id,site,start,end");
  std::vector<OffIntervalRow> rows;
  std::vector<std::string_view> cells;
  while (reader.next(cells, 4)) {
    const std::size_t row = reader.row();
    OffIntervalRow r;
    r.patient_id = std::string(cells[0]);
    try {
      r.site = site_from_string(cells[1]);
    } catch (const DataError& e) {
      throw ParseError(e.what(), row);
    }
    r.interval.start = csv::parse_double(cells[2], "start", row);
    r.interval.end = csv::parse_double(cells[3], "end", row);
    if (!(r.interval.start < r.interval.end)) throw ParseError("off interval start must precede end", row);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_off_intervals(const fs::path& path, std::span<const OffIntervalRow> rows) {
  auto out = csv::open_out(path);
  std::string buf = "patient_id,site,start,end\n";
  for (const auto& r : rows) {
    buf += r.patient_id;
    buf += ',';
    buf += site_name(r.site);
    buf += ',';
    csv::append_double(buf, r.interval.start);
    buf += ',';
    csv::append_double(buf, r.interval.end);
    buf += '\n';
  }
  out << buf;
}

std::vector<ShiftLabel> load_labels(const fs::path& path) {
  csv::Reader reader(path, "patient_id,shift_start,shift_end,braden_mobility");
  std::vector<ShiftLabel> rows;
  std::vector<std::string_view> cells;
  while (reader.next(cells, 4)) {
    const std::size_t row = reader.row();
    ShiftLabel s;
    s.patient_id = std::string(cells[0]);
    s.shift_start = csv::parse_double(cells[1], "shift_start", row);
    s.shift_end = csv::parse_double(cells[2], "shift_end", row);
    const long score = csv::parse_int(cells[3], "braden_mobility", row);
    if (score < 1 || score > 4) throw ParseError("braden_mobility must be 1..4", row);
    if (!(s.shift_start < s.shift_end)) throw ParseError("shift_start must precede shift_end", row);
    s.mobility = static_cast<MobilityClass>(score);
    rows.push_back(std::move(s));
  }
  return rows;
}

void write_labels(const fs::path& path, std::span<const ShiftLabel> rows) {
  auto out = csv::open_out(path);
  std::string buf = "patient_id,shift_start,shift_end,braden_mobility\n";
  for (const auto& s : rows) {
    buf += s.patient_id;
    buf += ',';
    csv::append_double(buf, s.shift_start);
    buf += ',';
    csv::append_double(buf, s.shift_end);
    buf += ',';
    buf += std::to_string(static_cast<int>(s.mobility));
    buf += '\n';
  }
  out << buf;
}

std::vector<OffInterval> intervals_for(std::span<const OffIntervalRow> rows, const std::string& patient,
                                       Site site) {
  std::vector<OffInterval> out;
  for (const auto& r : rows) {
    if (r.patient_id == patient && r.site == site) out.push_back(r.interval);
  }
  return out;
}

LabeledWindow segment_window(const RawRecording& rec, double start, std::span<const OffInterval> offs) {
  LabeledWindow w;
  w.patient_id = rec.patient_id;
  w.window_start = start;
  w.samples.assign(kWindowSamples, Vec3{0.0, 0.0, 0.0});
  w.valid.assign(kWindowSamples, 0);

  const auto& s = rec.samples;
  const std::size_t n = s.size();
  const double half = 0.5 / kSampleRate;
  const double tol = half + 1e-9;
  std::size_t j = static_cast<std::size_t>(
      std::lower_bound(s.begin(), s.end(), start - half, [](const Sample& a, double t) { return a.t < t; }) -
      s.begin());
  for (std::size_t i = 0; i < kWindowSamples && j < n; ++i) {
    const double ti = start + static_cast<double>(i) / kSampleRate;
    while (j + 1 < n && s[j + 1].t <= ti) ++j;
    std::size_t best = j;
    double dist = std::abs(s[j].t - ti);
    if (j + 1 < n && std::abs(s[j + 1].t - ti) < dist) {
      best = j + 1;
      dist = std::abs(s[j + 1].t - ti);
    }
    if (dist <= tol) {
      w.samples[i] = {s[best].x, s[best].y, s[best].z};
      w.valid[i] = 1;
    }
  }

  // Grid point i lies inside [a, b) iff ceil((a - start) * rate) <= i < ceil((b - start) * rate).
  const auto grid_index = [&](double t) -> std::size_t {
    const double k = std::ceil((t - start) * kSampleRate - 1e-6);
    if (k <= 0.0) return 0;
    return std::min(kWindowSamples, static_cast<std::size_t>(k));
  };
  for (const auto& off : offs) {
    const std::size_t lo = grid_index(off.start), hi = grid_index(off.end);
    for (std::size_t i = lo; i < hi; ++i) {
      w.samples[i] = {0.0, 0.0, 0.0};
      w.valid[i] = 0;
    }
  }
  return w;
}

std::optional<MobilityClass> label_at(std::span<const ShiftLabel> shifts, const std::string& patient,
                                      double t) {
  for (const auto& s : shifts) {
    if (s.patient_id == patient && s.shift_start <= t && t < s.shift_end) return s.mobility;
  }
  return std::nullopt;
}

std::vector<LabeledWindow> cut_windows(const RawRecording& rec, std::span<const ShiftLabel> shifts,
                                       std::span<const OffInterval> offs) {
  std::vector<LabeledWindow> out;
  if (rec.samples.empty()) return out;
  const double first = rec.samples.front().t, last = rec.samples.back().t;
  std::vector<const ShiftLabel*> mine;
  for (const auto& s : shifts) {
    if (s.patient_id == rec.patient_id) mine.push_back(&s);
  }
  std::sort(mine.begin(), mine.end(), [](auto* a, auto* b) { return a->shift_start < b->shift_start; });
  for (const auto* s : mine) {
    const double start = s->shift_start;
    if (start > last || start + kWindowSeconds <= first) continue;
    LabeledWindow w = segment_window(rec, start, offs);
    w.label = label_at(shifts, rec.patient_id, start);
    out.push_back(std::move(w));
  }
  return out;
}

Split SplitAssignment::of(const std::string& patient) const {
  auto it = patients.find(patient);
  if (it == patients.end()) throw DataError("patient '" + patient + "' is not in the split manifest");
  return it->second;
}

std::vector<std::string> SplitAssignment::members(Split s) const {
  std::vector<std::string> out;
  for (const auto& [p, sp] : patients) {
    if (sp == s) out.push_back(p);
  }
  return out;
}

SplitAssignment stratified_split(std::span<const WindowKey> windows, const SplitRatios& ratios,
                                 std::uint64_t seed) {
  if (windows.empty()) throw DataError("stratified_split: no windows to split");
  if (!(ratios.dev > 0.0 && ratios.dev <= 1.0 && ratios.train > 0.0 && ratios.train <= 1.0)) {
    throw ConfigError("stratified_split: ratios must lie in (0, 1]");
  }

  struct PatientInfo {
    std::array<std::size_t, kNumClasses> counts{};
    std::size_t total = 0;
  };
  std::map<std::string, PatientInfo> info;
  for (const auto& w : windows) {
    auto& p = info[w.patient_id];
    ++p.counts[class_index(w.label)];
    ++p.total;
  }

  // Stratify by majority class; ties go to the lower class.
  std::array<std::vector<std::string>, kNumClasses> groups;
  for (const auto& [id, p] : info) {
    const auto major = static_cast<std::size_t>(
        std::max_element(p.counts.begin(), p.counts.end()) - p.counts.begin());
    groups[major].push_back(id);
  }

  const std::array<double, 3> frac{ratios.dev * ratios.train, ratios.dev * (1.0 - ratios.train),
                                   1.0 - ratios.dev};
  const std::array<Split, 3> order{Split::train, Split::validation, Split::test};

  SplitAssignment out;
  out.seed = seed;
  std::mt19937_64 rng(seed);
  for (auto& group : groups) {
    std::shuffle(group.begin(), group.end(), rng);
    std::stable_sort(group.begin(), group.end(),
                     [&](const auto& a, const auto& b) { return info[a].total > info[b].total; });
    double group_total = 0.0;
    for (const auto& id : group) group_total += static_cast<double>(info[id].total);
    std::array<double, 3> filled{};
    for (const auto& id : group) {
      std::size_t pick = 0;
      double best = -1e300;
      for (std::size_t k = 0; k < 3; ++k) {
        const double deficit = frac[k] * group_total - filled[k];
        if (deficit > best + 1e-12) {
          best = deficit;
          pick = k;
        }
      }
      filled[pick] += static_cast<double>(info[id].total);
      out.patients[id] = order[pick];
    }
  }

  if (info.size() == 1) {
    out.warnings.push_back("only one patient ('" + info.begin()->first + "'); it is assigned to train");
  } else {
    for (auto s : order) {
      if (out.members(s).empty()) {
        out.warnings.push_back("split '" + std::string(split_name(s)) + "' received no patients");
      }
    }
  }
  return out;
}

SplitAssignment stratified_split(std::span<const LabeledWindow> windows, const SplitRatios& ratios,
                                 std::uint64_t seed) {
  std::vector<WindowKey> keys;
  keys.reserve(windows.size());
  for (const auto& w : windows) {
    if (!w.label) throw DataError("stratified_split: window of patient '" + w.patient_id + "' has no label");
    keys.push_back({w.patient_id, *w.label});
  }
  return stratified_split(std::span<const WindowKey>(keys), ratios, seed);
}

void write_split_manifest(const fs::path& path, const SplitAssignment& split) {
  json patients = json::object();
  for (const auto& [id, s] : split.patients) patients[id] = split_name(s);
  json doc{{"seed", split.seed}, {"patients", patients}, {"warnings", split.warnings}};
  auto out = csv::open_out(path);
  out << doc.dump(2) << '\n';
}

SplitAssignment load_split_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  SplitAssignment out;
  try {
    const json doc = json::parse(in);
    out.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& [id, s] : doc.at("patients").items()) {
      out.patients[id] = split_from_string(s.get<std::string>());
    }
    if (doc.contains("warnings")) out.warnings = doc.at("warnings").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace melon
