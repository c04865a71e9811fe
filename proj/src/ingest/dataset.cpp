#include "melon/dataset.hpp"

#include <algorithm>
#include <cmath>

#include "csv.hpp"
#include "melon/eval_stats.hpp"

namespace fs = std::filesystem;

namespace melon {

namespace {

constexpr std::string_view kIndexHeader =
    "patient_id,window_start,label,valid_samples,activity_x,activity_y,activity_z";

}  // namespace

Example make_example(const LabeledWindow& window, std::size_t image_size) {
  if (!window.label) throw DataError("window of patient " + window.patient_id + " has no label");
  Example e;
  e.patient_id = window.patient_id;
  e.window_start = window.window_start;
  e.label = *window.label;
  e.image = window_image(window, image_size, image_size);
  e.features = build_feature_sequence(window);
  e.activity = activity_counts(window);
  e.valid_samples = window.valid_count();
  return e;
}

std::vector<Example> preprocess_recordings(const fs::path& recordings, const fs::path& labels, const fs::path& offs,
                                           std::size_t image_size, PreprocessStats* stats) {
  if (!fs::is_directory(recordings)) throw DataError("not a directory: " + recordings.string());
  const auto shifts = load_labels(labels);
  const auto off_rows = offs.empty() ? std::vector<OffIntervalRow>{} : load_off_intervals(offs);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(recordings))
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no recording CSV files in " + recordings.string());

  PreprocessStats s;
  std::vector<Example> out;
  for (const auto& f : files) {
    const auto rec = load_recording(f);
    ++s.recordings;
    const auto intervals = intervals_for(off_rows, rec.patient_id, rec.site);
    for (const auto& w : cut_windows(rec, shifts, intervals)) {
      if (!w.label) {
        ++s.unlabeled;
        continue;
      }
      out.push_back(make_example(w, image_size));
      ++s.windows;
    }
  }
  if (stats) *stats = s;
  return out;
}

std::string example_key(const Example& e) {
  return e.patient_id + "_" + std::to_string(static_cast<long long>(std::llround(e.window_start)));
}

void write_examples(const fs::path& dir, const std::vector<Example>& examples) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "features");
  auto index = csv::open_out(dir / "index.csv");
  std::string buf(kIndexHeader);
  buf += '\n';
  for (const auto& e : examples) {
    const auto key = example_key(e);
    write_png(dir / "images" / (key + ".png"), e.image);
    write_feature_csv(dir / "features" / (key + ".csv"), e.features);
    buf += e.patient_id + ',';
    csv::append_double(buf, e.window_start);
    buf += ',' + std::to_string(static_cast<int>(e.label)) + ',' + std::to_string(e.valid_samples);
    for (std::size_t a = 0; a < 3; ++a) {
      buf += ',';
      if (e.activity) csv::append_double(buf, (*e.activity)[a]);
    }
    buf += '\n';
  }
  index << buf;
}

std::vector<Example> load_examples(const fs::path& dir) {
  csv::Reader reader(dir / "index.csv", kIndexHeader);
  std::vector<std::string_view> cells;
  std::vector<Example> out;
  while (reader.next(cells, 7)) {
    Example e;
    e.patient_id = std::string(cells[0]);
    if (e.patient_id.empty()) throw ParseError("empty patient_id", reader.row());
    e.window_start = csv::parse_double(cells[1], "window_start", reader.row());
    e.label = mobility_from_int(csv::parse_int(cells[2], "label", reader.row()));
    e.valid_samples = static_cast<std::size_t>(csv::parse_int(cells[3], "valid_samples", reader.row()));
    if (!cells[4].empty()) {
      std::array<double, 3> a{};
      static constexpr const char* names[] = {"activity_x", "activity_y", "activity_z"};
      for (std::size_t k = 0; k < 3; ++k) a[k] = csv::parse_double(cells[4 + k], names[k], reader.row());
      e.activity = a;
    }
    const auto key = example_key(e);
    e.image = read_png(dir / "images" / (key + ".png"));
    e.features = read_feature_csv(dir / "features" / (key + ".csv"));
    out.push_back(std::move(e));
  }
  if (out.empty()) throw DataError(dir.string() + ": no examples in index");
  return out;
}

}  // namespace melon
