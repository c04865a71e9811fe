#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "melon/config.hpp"
#include "melon/dataset.hpp"
#include "melon/pipeline.hpp"

#ifndef MELON_VERSION
#define MELON_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace melon;

namespace {

struct Options {
  std::string config;
  std::string command_line;

  // Path overrides.
  std::string data_dir, recordings, labels, offs, examples, split, out, checkpoint, warm;
  // Value overrides; applied only when given.
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> patients, min_windows, max_windows, image_size, epochs, patience, resamples;
  std::optional<double> lr, spread, sway;
  std::optional<std::string> branches;
  bool freeze_image = false;
  bool baseline = false;

  // stats / predict
  std::string kruskal;
  std::vector<std::string> wilcoxon;
  std::string image, features;
};

RunConfig effective_config(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (!o.data_dir.empty()) c.paths.data_dir = o.data_dir;
  if (!o.recordings.empty()) c.paths.recordings = o.recordings;
  if (!o.labels.empty()) c.paths.labels = o.labels;
  if (!o.offs.empty()) c.paths.off_intervals = o.offs;
  if (!o.examples.empty()) c.paths.examples = o.examples;
  if (!o.split.empty()) c.paths.split = o.split;
  if (o.patients) c.synth.patients = *o.patients;
  if (o.min_windows) c.synth.min_windows = *o.min_windows;
  if (o.max_windows) c.synth.max_windows = *o.max_windows;
  if (o.spread) c.synth.patient_spread = *o.spread;
  if (o.sway) c.synth.sway_amplitude = *o.sway;
  if (o.image_size) c.image_size = c.model.image.height = c.model.image.width = *o.image_size;
  if (o.epochs) c.train.max_epochs = c.train.pretrain_epochs = *o.epochs;
  if (o.patience) c.train.patience = *o.patience;
  if (o.resamples) c.eval.resamples = *o.resamples;
  if (o.lr) c.train.lr = *o.lr;
  if (o.freeze_image) c.train.freeze_image = true;
  if (o.branches) c.model.branches = branches_from_string(*o.branches);
  c.validate();
  return c;
}

fs::path recordings_path(const RunConfig& c) {
  return c.paths.recordings.empty() ? fs::path(c.paths.data_dir) / "recordings" : fs::path(c.paths.recordings);
}
fs::path labels_path(const RunConfig& c) {
  return c.paths.labels.empty() ? fs::path(c.paths.data_dir) / "labels.csv" : fs::path(c.paths.labels);
}
fs::path offs_path(const RunConfig& c) {
  return c.paths.off_intervals.empty() ? fs::path(c.paths.data_dir) / "off_intervals.csv"
                                       : fs::path(c.paths.off_intervals);
}

// Effective config, seed and tool version, so the run can be repeated from its directory.
void record_run(const fs::path& dir, const RunConfig& c, const std::string& command, std::uint64_t seed,
                const Options& o) {
  fs::create_directories(dir);
  RunConfig saved = c;
  save_run_config(dir / "config.json", saved);
  std::ofstream out(dir / "run.json");
  out << Json{{"tool", "melon"}, {"version", MELON_VERSION}, {"command", command}, {"seed", seed},
              {"arguments", o.command_line}}
             .dump(2)
      << '\n';
}

std::vector<Example> load_with_split(const RunConfig& c, SplitAssignment& split) {
  auto examples = load_examples(c.paths.examples);
  split = load_split_manifest(c.paths.split);
  return examples;
}

int cmd_synth(const Options& o) {
  RunConfig c = effective_config(o);
  if (o.seed) c.synth.seed = *o.seed;
  const fs::path dir = o.out.empty() ? fs::path(c.paths.data_dir) : fs::path(o.out);
  write_cohort(c.synth, dir);
  record_run(dir, c, "synth", c.synth.seed, o);
  std::cout << "wrote " << c.synth.patients << " synthetic patients to " << dir.string() << '\n';
  return 0;
}

int cmd_preprocess(const Options& o) {
  RunConfig c = effective_config(o);
  if (!o.out.empty()) c.paths.examples = o.out;
  PreprocessStats stats;
  const auto examples = preprocess_recordings(recordings_path(c), labels_path(c),
                                              fs::exists(offs_path(c)) ? offs_path(c) : fs::path(), c.image_size,
                                              &stats);
  if (examples.empty()) throw DataError("no labelled windows found");
  write_examples(c.paths.examples, examples);
  record_run(c.paths.examples, c, "preprocess", 0, o);
  std::cout << "preprocessed " << stats.windows << " windows from " << stats.recordings << " recordings ("
            << stats.unlabeled << " unlabelled skipped) into " << c.paths.examples << '\n';
  return 0;
}

int cmd_split(const Options& o) {
  RunConfig c = effective_config(o);
  if (o.seed) c.split_seed = *o.seed;
  if (!o.out.empty()) c.paths.split = o.out;
  const auto examples = load_examples(c.paths.examples);
  std::vector<WindowKey> keys;
  for (const auto& e : examples) keys.push_back({e.patient_id, e.label});
  const auto split = stratified_split(keys, c.split, c.split_seed);
  write_split_manifest(c.paths.split, split);
  for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
  std::cout << "split " << split.patients.size() << " patients: " << split.members(Split::train).size() << " train, "
            << split.members(Split::validation).size() << " validation, " << split.members(Split::test).size()
            << " test -> " << c.paths.split << '\n';
  return 0;
}

TrainHooks epoch_printer(const fs::path& log_path, bool validation) {
  TrainHooks hooks;
  hooks.on_epoch = [log_path, validation](const EpochLog& e) {
    append_epoch_log(log_path, e);
    std::cout << "epoch " << e.epoch << " loss " << e.train_loss;
    if (validation) std::cout << " val_auroc " << e.val_auroc;
    std::cout << " (" << e.seconds << " s)" << std::endl;
  };
  return hooks;
}

int cmd_pretrain(const Options& o) {
  RunConfig c = effective_config(o);
  if (o.seed) c.train.seed = *o.seed;
  const fs::path dir = o.out.empty() ? fs::path(c.paths.run_dir) : fs::path(o.out);
  SplitAssignment split;
  const auto examples = load_with_split(c, split);
  record_run(dir, c, "pretrain", c.train.seed, o);
  fs::remove(dir / "pretrain_log.ndjson");
  const auto res = pretrain(select_split(examples, split, Split::train), split, c.model, c.train,
                            epoch_printer(dir / "pretrain_log.ndjson", false));
  save_checkpoint(dir / "pretrain.ckpt", res.checkpoint);
  std::cout << "pretraining loss " << res.losses.front() << " -> " << res.losses.back() << "; wrote "
            << (dir / "pretrain.ckpt").string() << '\n';
  return 0;
}

int cmd_train(const Options& o) {
  RunConfig c = effective_config(o);
  if (o.seed) c.train.seed = *o.seed;
  const fs::path dir = o.out.empty() ? fs::path(c.paths.run_dir) : fs::path(o.out);
  SplitAssignment split;
  const auto examples = load_with_split(c, split);
  std::optional<Checkpoint> warm;
  if (!o.warm.empty()) warm = load_checkpoint(o.warm);
  record_run(dir, c, "train", c.train.seed, o);
  fs::remove(dir / "train_log.ndjson");
  const auto res = train(select_split(examples, split, Split::train), select_split(examples, split, Split::validation),
                         c.model, c.train, warm ? &*warm : nullptr, epoch_printer(dir / "train_log.ndjson", true));
  save_checkpoint(dir / "model.ckpt", res.checkpoint);
  std::cout << "best epoch " << res.best_epoch << " of " << res.epochs_run << ", validation AUROC "
            << res.checkpoint.best_val_auroc << "; wrote " << (dir / "model.ckpt").string() << '\n';
  return 0;
}

int cmd_eval(const Options& o) {
  RunConfig c = effective_config(o);
  if (o.seed) c.eval.seed = *o.seed;
  const fs::path dir = o.out.empty() ? fs::path(c.paths.run_dir) : fs::path(o.out);
  const auto ckpt = load_checkpoint(o.checkpoint);
  if (ckpt.kind != "model") throw DataError(o.checkpoint + " is a " + ckpt.kind + " checkpoint, not a model");
  SplitAssignment split;
  const auto examples = load_with_split(c, split);
  const auto test = select_split(examples, split, Split::test);
  if (test.empty()) throw DataError("test split is empty");
  const auto model = model_from_checkpoint(ckpt);
  const auto scores = score_examples(model, ckpt.norm, test);
  const auto report = evaluate_scores(scores, c.eval);
  record_run(dir, c, "eval", c.eval.seed, o);
  write_scores_csv(dir / "scores.csv", scores);
  write_report_json(dir / "report.json", report);
  print_report(std::cout, report, "MELON (" + std::string(branches_name(ckpt.model.branches)) + ")");
  if (o.baseline) {
    std::vector<BaselineWindow> tr, te;
    for (const auto* e : select_split(examples, split, Split::train))
      tr.push_back({e->patient_id, e->window_start, e->label, e->activity});
    for (const auto* e : test) te.push_back({e->patient_id, e->window_start, e->label, e->activity});
    std::vector<ScoredWindow> base_scores;
    const auto base = activity_counts_baseline(tr, te, c.eval, &base_scores);
    write_scores_csv(dir / "baseline_scores.csv", base_scores);
    write_report_json(dir / "baseline_report.json", base);
    print_report(std::cout, base, "activity-counts baseline");
  }
  return 0;
}

int cmd_stats(const Options& o) {
  RunConfig c = effective_config(o);
  if (o.seed) c.eval.seed = *o.seed;
  if (o.kruskal.empty() && o.wilcoxon.empty()) throw ConfigError("stats needs --kruskal or --wilcoxon");
  if (!o.kruskal.empty()) {
    const auto res = brain_status_analysis(o.kruskal);
    std::cout << "group      n   median  q1    q3\n";
    for (const auto& g : res.groups) {
      std::cout << std::left << std::setw(10) << g.group << ' ' << std::setw(3) << g.n << ' ' << std::setw(7)
                << g.median << ' ' << std::setw(5) << g.q1 << ' ' << g.q3 << '\n';
    }
    std::cout << "Kruskal-Wallis H = " << res.test.h << ", df = " << res.test.df << ", p = " << res.test.p << '\n';
  }
  if (!o.wilcoxon.empty()) {
    if (o.wilcoxon.size() != 2) throw ConfigError("--wilcoxon takes two scores files");
    // Both methods are resampled with the same patient draws.
    const auto a = bootstrap_aurocs(read_scores_csv(o.wilcoxon[0]), std::nullopt, c.eval);
    const auto b = bootstrap_aurocs(read_scores_csv(o.wilcoxon[1]), std::nullopt, c.eval);
    if (a.empty() || b.empty()) throw DataError("no non-degenerate bootstrap resamples");
    const auto r = wilcoxon_rank_sum(a, b);
    std::cout << "bootstrap overall AUROC medians " << quantile(a, 0.5) << " vs " << quantile(b, 0.5) << '\n'
              << "Wilcoxon rank-sum U = " << r.u << ", p = " << r.p << (r.exact ? " (exact)" : " (normal approx.)")
              << '\n';
  }
  return 0;
}

int cmd_predict(const Options& o) {
  const auto ckpt = load_checkpoint(o.checkpoint);
  const auto model = model_from_checkpoint(ckpt);
  const auto img = read_png(o.image);
  const auto seq = read_feature_csv(o.features);
  const auto probs = melon_forward(model, img, seq, ckpt.norm);
  std::size_t best = 0;
  for (std::size_t k = 0; k < kNumClasses; ++k) {
    const auto cls = static_cast<MobilityClass>(k + 1);
    std::cout << k + 1 << ' ' << mobility_name(cls) << ' ' << probs[k] << '\n';
    if (probs[k] > probs[best]) best = k;
  }
  std::cout << "predicted " << best + 1 << ' ' << mobility_name(static_cast<MobilityClass>(best + 1)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mobility classification from wearable accelerometry", "melon"};
  app.set_version_flag("--version", MELON_VERSION);
  app.require_subcommand(1);
  Options o;
  for (int i = 0; i < argc; ++i) o.command_line += (i ? " " : "") + std::string(argv[i]);

  auto common = [&](CLI::App* s) {
    s->add_option("-c,--config", o.config, "JSON run configuration; flags override its values")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Seed for this step");
  };
  auto data = [&](CLI::App* s) {
    s->add_option("--examples", o.examples, "Preprocessed examples directory");
    s->add_option("--split", o.split, "Split manifest JSON");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled cohort");
  common(synth);
  synth->add_option("-o,--out", o.out, "Output directory (default: paths.data_dir)");
  synth->add_option("--patients", o.patients, "Number of patients");
  synth->add_option("--min-windows", o.min_windows, "Minimum 12-hour windows per patient");
  synth->add_option("--max-windows", o.max_windows, "Maximum 12-hour windows per patient");
  synth->add_option("--spread", o.spread, "Per-patient log-normal spread of burst rate and amplitude");
  synth->add_option("--sway", o.sway, "Largest per-patient orientation sway amplitude in rad");

  auto* pre = app.add_subcommand("preprocess", "Cut windows and write spectrogram images and feature sequences");
  common(pre);
  pre->add_option("--data", o.data_dir, "Cohort directory with recordings/, labels.csv, off_intervals.csv");
  pre->add_option("--recordings", o.recordings, "Directory of recording CSV files");
  pre->add_option("--labels", o.labels, "Shift labels CSV");
  pre->add_option("--offs", o.offs, "Device-off intervals CSV");
  pre->add_option("-o,--out", o.out, "Output examples directory");
  pre->add_option("--image-size", o.image_size, "Spectrogram image side in pixels");

  auto* split = app.add_subcommand("split", "Patient-level stratified train/validation/test split");
  common(split);
  split->add_option("--examples", o.examples, "Preprocessed examples directory");
  split->add_option("-o,--out", o.out, "Split manifest to write");

  auto* ptrain = app.add_subcommand("pretrain", "Autoregressive pretraining of the sequence encoder");
  common(ptrain);
  data(ptrain);
  ptrain->add_option("-o,--out", o.out, "Run directory");
  ptrain->add_option("--epochs", o.epochs, "Pretraining epochs");

  auto* tr = app.add_subcommand("train", "Supervised training with early stopping");
  common(tr);
  data(tr);
  tr->add_option("-o,--out", o.out, "Run directory");
  tr->add_option("--warm", o.warm, "Pretrained encoder checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--branches", o.branches, "fused, image_only or sequence_only");
  tr->add_option("--epochs", o.epochs, "Maximum epochs");
  tr->add_option("--patience", o.patience, "Early-stopping patience in epochs");
  tr->add_option("--lr", o.lr, "Learning rate");
  tr->add_flag("--freeze-image", o.freeze_image, "Keep the image encoder fixed");

  auto* ev = app.add_subcommand("eval", "Score the test split and report AUROC with bootstrap intervals");
  common(ev);
  data(ev);
  ev->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("-o,--out", o.out, "Run directory for report.json and scores.csv");
  ev->add_option("--resamples", o.resamples, "Bootstrap resamples");
  ev->add_flag("--baseline", o.baseline, "Also fit and score the activity-counts baseline");

  auto* st = app.add_subcommand("stats", "Kruskal-Wallis brain-status analysis or Wilcoxon model comparison");
  common(st);
  st->add_option("--kruskal", o.kruskal, "CSV patient_id,braden_mobility,brain_status")->check(CLI::ExistingFile);
  st->add_option("--wilcoxon", o.wilcoxon, "Two scores CSV files to compare")->expected(2)->check(CLI::ExistingFile);
  st->add_option("--resamples", o.resamples, "Bootstrap resamples for --wilcoxon");

  auto* pr = app.add_subcommand("predict", "Score one preprocessed window");
  pr->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  pr->add_option("--image", o.image, "Spectrogram PNG")->required()->check(CLI::ExistingFile);
  pr->add_option("--features", o.features, "Feature sequence CSV")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "melon: error: " << e.what() << "\n\n";
    for (auto* sub : app.get_subcommands()) {
      std::cerr << sub->help();
      return 1;
    }
    std::cerr << app.help();
    return 1;
  }

  try {
    if (synth->parsed()) return cmd_synth(o);
    if (pre->parsed()) return cmd_preprocess(o);
    if (split->parsed()) return cmd_split(o);
    if (ptrain->parsed()) return cmd_pretrain(o);
    if (tr->parsed()) return cmd_train(o);
    if (ev->parsed()) return cmd_eval(o);
    if (st->parsed()) return cmd_stats(o);
    if (pr->parsed()) return cmd_predict(o);
  } catch (const ConfigError& e) {
    std::cerr << "melon: configuration error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "melon: data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "melon: runtime error: " << e.what() << '\n';
    return 3;
  }
  return 1;
}
