#include "melon/pipeline.hpp"

#include <chrono>
#include <ostream>

namespace melon {

namespace {

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<BaselineWindow> baseline_windows(const std::vector<const Example*>& examples) {
  std::vector<BaselineWindow> out;
  for (const auto* e : examples) out.push_back({e->patient_id, e->window_start, e->label, e->activity});
  return out;
}

}  // namespace

std::vector<Example> synth_examples(const SynthConfig& cfg, std::size_t image_size) {
  cfg.validate();
  std::vector<Example> out;
  for (std::size_t i = 0; i < cfg.patients; ++i) {
    const auto p = generate_patient(cfg, i);
    std::vector<OffInterval> offs;
    for (const auto& o : p.offs) offs.push_back(o.interval);
    for (const auto& w : cut_windows(p.recording, p.shifts, offs)) out.push_back(make_example(w, image_size));
  }
  return out;
}

const VariantResult& BenchmarkResult::variant(Branches b) const {
  for (const auto& v : variants)
    if (v.branches == b) return v;
  throw ConfigError("benchmark has no variant " + std::string(branches_name(b)));
}

BenchmarkResult run_benchmark(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  BenchmarkResult res;

  const auto examples = synth_examples(cfg.synth, cfg.image_size);
  std::vector<WindowKey> keys;
  for (const auto& e : examples) keys.push_back({e.patient_id, e.label});
  const auto split = stratified_split(keys, cfg.split, cfg.split_seed);
  const auto tr = select_split(examples, split, Split::train);
  const auto va = select_split(examples, split, Split::validation);
  const auto te = select_split(examples, split, Split::test);
  res.train_windows = tr.size();
  res.val_windows = va.size();
  res.test_windows = te.size();
  if (log) {
    *log << "data: " << examples.size() << " windows (" << tr.size() << " train, " << va.size() << " validation, "
         << te.size() << " test) in " << since(t0) << " s\n";
  }

  TrainHooks hooks;
  if (log) {
    hooks.on_epoch = [log](const EpochLog& e) {
      *log << "  epoch " << e.epoch << " loss " << e.train_loss << " val " << e.val_auroc << " (" << e.seconds
           << " s)\n";
    };
  }
  if (log) *log << "pretrain\n";
  const auto pre = pretrain(tr, split, cfg.model, cfg.train, hooks);

  for (Branches b : {Branches::fused, Branches::image_only, Branches::sequence_only}) {
    const auto t1 = std::chrono::steady_clock::now();
    MelonConfig mc = cfg.model;
    mc.branches = b;
    if (log) *log << "train " << branches_name(b) << "\n";
    const auto run = train(tr, va, mc, cfg.train, &pre.checkpoint, hooks);
    const auto model = model_from_checkpoint(run.checkpoint);
    VariantResult v;
    v.branches = b;
    v.report = evaluate_scores(score_examples(model, run.checkpoint.norm, te), cfg.eval);
    v.best_epoch = run.best_epoch;
    v.epochs_run = run.epochs_run;
    v.seconds = since(t1);
    res.variants.push_back(std::move(v));
  }
  res.baseline = activity_counts_baseline(baseline_windows(tr), baseline_windows(te), cfg.eval);
  res.seconds = since(t0);
  return res;
}

}  // namespace melon
