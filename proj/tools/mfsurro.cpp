// mfsurro: dataset generation, training, evaluation, sweeps and plots.
//
// Settings precedence: built-in defaults < --config file < --set key=value
// < dedicated flags. Exit codes: 0 success, 1 internal error, 2 config,
// 3 data, 4 solver, 5 training.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mfsurro/mfsurro.hpp"

using namespace mfsurro;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kSolver = 4, kTraining = 5 };

struct Globals {
  std::string config_file;
  std::vector<std::string> sets;
  bool dry_run = false;
  bool quiet = false;
};

/// Flags that map one-to-one onto config keys.
struct KeyFlags {
  std::vector<std::pair<CLI::Option*, std::string>> bound;
  std::map<std::string, std::string> values;

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    bound.emplace_back(app->add_option(flag, values[key], help), key);
  }
  void apply(ExperimentConfig& c) const {
    for (const auto& [opt, key] : bound)
      if (opt->count() > 0) apply_setting(c, key, values.at(key));
  }
};

ExperimentConfig resolve(const Globals& g, const KeyFlags& flags) {
  ExperimentConfig c;
  if (!g.config_file.empty()) apply_settings(c, read_config_file(g.config_file));
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(c, s.substr(0, eq), s.substr(eq + 1));
  }
  flags.apply(c);
  c.validate();
  return c;
}

ProgressFn progress_fn(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

void print_plan(const std::string& command, const std::vector<fs::path>& files) {
  std::cout << "dry run: " << command << " would write " << files.size() << " files\n";
  for (const auto& f : files) std::cout << "  " << f.string() << '\n';
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix);
}

fs::path parent_or_dot(const fs::path& p) { return p.parent_path().empty() ? fs::path(".") : p.parent_path(); }

// --- gen-data -------------------------------------------------------------------

int cmd_gen_data(const Globals& g, const KeyFlags& flags) {
  const ExperimentConfig c = resolve(g, flags);
  const DatasetManifest m = c.gen.manifest();
  std::vector<fs::path> plan;
  for (Split s : kAllSplits)
    if (m.count(s) > 0) plan.push_back(c.data_dir / split_file(s));
  plan.push_back(c.data_dir / "manifest.txt");
  if (g.dry_run) {
    plan.push_back(c.data_dir / "run_manifest.json");
    print_plan("gen-data", plan);
    return kOk;
  }
  const GenerationSummary summary = generate_dataset(m, c.data_dir);
  RunManifest rm("gen-data");
  rm.set_all(config_to_settings(c));
  for (const auto& f : plan) rm.add(f);
  rm.write(c.data_dir);
  if (!g.quiet)
    for (const auto& [split, ss] : summary.splits)
      std::cerr << to_string(split) << ": " << ss.count << " samples\n";
  return kOk;
}

// --- pretrain -------------------------------------------------------------------

struct StageFlags {
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::string out, log, checkpoint;
  std::size_t hf_count = 0;
};

std::uint64_t stage_seed(const ExperimentConfig& c, const StageFlags& f) { return f.seed ? *f.seed : c.seeds.front(); }

template <class T>
void pretrain_as(const ExperimentConfig& c, Mode mode, std::uint64_t seed, const StageFlags& f, const fs::path& log,
                 const Globals& g, RunManifest& rm) {
  std::vector<Sample> samples = load_split(c.data_dir, mode == Mode::dmfm ? Split::lf : Split::lf_unlabeled);
  if (samples.empty()) throw DataError("dataset has no pre-training samples for " + to_string(mode));
  if (c.pretrain_count > samples.size()) throw ConfigError("pretrain_count exceeds the available samples");
  samples = take_first(std::move(samples), c.pretrain_count);
  const fs::path out(f.out);
  const TrainHooks hooks = stage_hooks(c, log, out.stem().string(), parent_or_dot(out), progress_fn(g));
  TrainHistory hist;
  Network<T> net = pretrain_stage<T>(c, mode, seed, samples, hooks, &hist);
  write_checkpoint(out, net.to_checkpoint({{"mode", to_string(mode)}, {"seed", std::to_string(seed)},
                                           {"stage", "pretrain"}}));
  rm.add(log);
  for (const auto& ck : hist.checkpoints) rm.add(ck);
  rm.add(out);
}

int cmd_pretrain(const Globals& g, const KeyFlags& flags, const StageFlags& f) {
  const ExperimentConfig c = resolve(g, flags);
  const Mode mode = parse_mode(f.mode);
  if (mode == Mode::sfm) throw ConfigError("sfm has no pre-training stage");
  const std::uint64_t seed = stage_seed(c, f);
  const fs::path out(f.out), log = f.log.empty() ? sibling(out, "_log.csv") : fs::path(f.log);
  if (g.dry_run) {
    print_plan("pretrain", {log, out, sibling(out, "_manifest.json")});
    return kOk;
  }
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  RunManifest rm("pretrain");
  rm.set_all(config_to_settings(c));
  rm.set("mode", to_string(mode));
  rm.set("seed", std::to_string(seed));
  if (c.precision == Precision::f32) pretrain_as<float>(c, mode, seed, f, log, g, rm);
  else pretrain_as<double>(c, mode, seed, f, log, g, rm);
  rm.write(parent_or_dot(out), out.stem().string() + "_manifest.json");
  return kOk;
}

// --- finetune -------------------------------------------------------------------

template <class T>
void finetune_as(const ExperimentConfig& c, Mode mode, std::uint64_t seed, const StageFlags& f, const fs::path& log,
                 const Globals& g, RunManifest& rm) {
  std::vector<Sample> hf = load_split(c.data_dir, Split::hf);
  if (f.hf_count == 0 || f.hf_count > hf.size())
    throw ConfigError("hf-count " + std::to_string(f.hf_count) + " is outside 1.." + std::to_string(hf.size()));
  hf.resize(f.hf_count);
  Network<T> net = f.checkpoint.empty() ? build_network<T>(c.unet, seed)
                                        : Network<T>::from_checkpoint(read_checkpoint(f.checkpoint));
  const fs::path out(f.out);
  const TrainHooks hooks = stage_hooks(c, log, out.stem().string(), parent_or_dot(out), progress_fn(g));
  const TrainHistory hist = finetune(net, hf, c.stage_config(mode, seed, false), hooks);
  write_checkpoint(out, net.to_checkpoint({{"mode", to_string(mode)},
                                           {"seed", std::to_string(seed)},
                                           {"hf_count", std::to_string(f.hf_count)},
                                           {"stage", "finetune"}}));
  rm.add(log);
  for (const auto& ck : hist.checkpoints) rm.add(ck);
  rm.add(out);
}

int cmd_finetune(const Globals& g, const KeyFlags& flags, const StageFlags& f) {
  const ExperimentConfig c = resolve(g, flags);
  Mode mode = Mode::sfm;
  if (!f.checkpoint.empty()) {
    const Checkpoint ck = read_checkpoint(f.checkpoint);
    if (auto it = ck.meta.find("mode"); it != ck.meta.end()) mode = parse_mode(it->second);
    if (!f.mode.empty()) mode = parse_mode(f.mode);
    if (mode == Mode::sfm) throw ConfigError("sfm fine-tunes a fresh network; drop --checkpoint");
  } else if (!f.mode.empty() && parse_mode(f.mode) != Mode::sfm) {
    throw ConfigError(f.mode + " fine-tuning needs a pre-trained --checkpoint");
  }
  const std::uint64_t seed = stage_seed(c, f);
  const fs::path out(f.out), log = f.log.empty() ? sibling(out, "_log.csv") : fs::path(f.log);
  if (g.dry_run) {
    print_plan("finetune", {log, out, sibling(out, "_manifest.json")});
    return kOk;
  }
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  RunManifest rm("finetune");
  rm.set_all(config_to_settings(c));
  rm.set("mode", to_string(mode));
  rm.set("seed", std::to_string(seed));
  rm.set("hf_count", std::to_string(f.hf_count));
  if (!f.checkpoint.empty()) rm.set("checkpoint", f.checkpoint);
  if (c.precision == Precision::f32) finetune_as<float>(c, mode, seed, f, log, g, rm);
  else finetune_as<double>(c, mode, seed, f, log, g, rm);
  rm.write(parent_or_dot(out), out.stem().string() + "_manifest.json");
  return kOk;
}

// --- evaluate -------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint, out, per_sample;
};

template <class T>
MetricsReport evaluate_as(const ExperimentConfig& c, const Checkpoint& ck) {
  Network<T> net = Network<T>::from_checkpoint(ck);
  std::vector<Sample> test = load_split(c.data_dir, Split::test);
  if (c.test_count > test.size()) throw ConfigError("test_count exceeds the available test samples");
  test = take_first(std::move(test), c.test_count);
  return evaluate(net, test);
}

int cmd_evaluate(const Globals& g, const KeyFlags& flags, const EvalFlags& f) {
  const ExperimentConfig c = resolve(g, flags);
  const fs::path out(f.out);
  std::vector<fs::path> plan = {out};
  if (!f.per_sample.empty()) plan.push_back(f.per_sample);
  if (g.dry_run) {
    plan.push_back(sibling(out, "_manifest.json"));
    print_plan("evaluate", plan);
    return kOk;
  }
  const Checkpoint ck = read_checkpoint(f.checkpoint);
  MetricsReport r = c.precision == Precision::f32 ? evaluate_as<float>(c, ck) : evaluate_as<double>(c, ck);
  if (auto it = ck.meta.find("mode"); it != ck.meta.end()) r.model = model_tag(parse_mode(it->second));
  if (auto it = ck.meta.find("hf_count"); it != ck.meta.end()) r.hf_count = std::stoull(it->second);
  if (auto it = ck.meta.find("seed"); it != ck.meta.end()) r.seed = std::stoull(it->second);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  write_metrics_csv(out, {r});
  if (!f.per_sample.empty()) write_per_sample_csv(f.per_sample, r);
  RunManifest rm("evaluate");
  rm.set_all(config_to_settings(c));
  rm.set("checkpoint", f.checkpoint);
  for (const auto& p : plan) rm.add(p);
  rm.write(parent_or_dot(out), out.stem().string() + "_manifest.json");
  if (!g.quiet) std::cerr << r.model << " mae " << r.mae << " cmae " << r.cmae << " mt_ae " << r.mt_ae << '\n';
  return kOk;
}

// --- sweep ----------------------------------------------------------------------

int cmd_sweep(const Globals& g, const KeyFlags& flags) {
  const ExperimentConfig c = resolve(g, flags);
  if (g.dry_run) {
    auto plan = plan_sweep(c);
    plan.push_back(c.out_dir / "run_manifest.json");
    print_plan("sweep", plan);
    return kOk;
  }
  const SweepResult r = run_sweep(c, progress_fn(g));
  if (!g.quiet)
    for (const auto& s : r.summary)
      std::cerr << s.model << " hf=" << s.hf_count << " median mae " << s.median_mae << '\n';
  return kOk;
}

// --- plot -----------------------------------------------------------------------

struct PlotFlags {
  std::string split = "test", checkpoint, out_dir = "plots", sweep, out;
  std::size_t index = 0;
  int scale = 2;
};

template <class T>
ScalarField predict_with(const Checkpoint& ck, const Sample& s) {
  Network<T> net = Network<T>::from_checkpoint(ck);
  return predict_hf(net, s);
}

int cmd_plot(const Globals& g, const KeyFlags& flags, const PlotFlags& f) {
  const ExperimentConfig c = resolve(g, flags);
  if (!f.sweep.empty()) {
    const fs::path out = f.out.empty() ? sibling(f.sweep, "_mae.ppm") : fs::path(f.out);
    if (g.dry_run) {
      print_plan("plot", {out, sibling(out, "_manifest.json")});
      return kOk;
    }
    if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
    write_ppm(out, render_sweep_plot(summarize(read_metrics_csv(f.sweep))));
    RunManifest rm("plot");
    rm.set("sweep", f.sweep);
    rm.add(out);
    rm.write(parent_or_dot(out), out.stem().string() + "_manifest.json");
    return kOk;
  }

  Split split = Split::test;
  bool found = false;
  for (Split s : kAllSplits)
    if (to_string(s) == f.split) {
      split = s;
      found = true;
    }
  if (!found) throw ConfigError("unknown split '" + f.split + "'");
  const fs::path dir(f.out_dir);
  const std::string stem = f.split + "_" + std::to_string(f.index);
  std::vector<fs::path> plan = {dir / (stem + "_layout.ppm")};
  if (split_has_lf(split)) plan.push_back(dir / (stem + "_lf.ppm"));
  if (split_has_hf(split)) plan.push_back(dir / (stem + "_hf.ppm"));
  if (split_has_lf(split) && split_has_hf(split)) plan.push_back(dir / (stem + "_interp_error.ppm"));
  if (!f.checkpoint.empty()) {
    plan.push_back(dir / (stem + "_pred.ppm"));
    if (split_has_hf(split)) plan.push_back(dir / (stem + "_pred_error.ppm"));
  }
  plan.push_back(dir / (stem + "_ranges.csv"));
  if (g.dry_run) {
    plan.push_back(dir / (stem + "_manifest.json"));
    print_plan("plot", plan);
    return kOk;
  }
  const std::vector<Sample> samples = load_split(c.data_dir, split);
  if (f.index >= samples.size())
    throw ConfigError("index " + std::to_string(f.index) + " is outside split " + f.split + " (" +
                      std::to_string(samples.size()) + " samples)");
  const Sample& s = samples[f.index];
  fs::create_directories(dir);
  std::ofstream ranges(dir / (stem + "_ranges.csv"), std::ios::trunc);
  ranges << "image,min,max\n";
  auto emit = [&](const std::string& name, const ScalarField& field, bool signed_map, int scale) {
    const fs::path p = dir / (stem + "_" + name + ".ppm");
    double lo = field.min(), hi = field.max();
    if (signed_map) {
      hi = std::max(std::abs(lo), std::abs(hi));
      lo = -hi;
    }
    write_ppm(p, render_field(field, lo, hi, scale));
    ranges << p.filename().string() << ',' << detail::format_double(lo) << ',' << detail::format_double(hi) << '\n';
  };
  const int lf_scale = f.scale * (s.hf_n / s.lf_n);
  emit("layout", s.x_lf(), false, lf_scale);
  if (split_has_lf(split)) emit("lf", s.lf_field(), false, lf_scale);
  if (split_has_hf(split)) emit("hf", s.hf_field(), false, f.scale);
  if (split_has_lf(split) && split_has_hf(split))
    emit("interp_error", interp_error_map(s.lf_field(), s.hf_field()), true, f.scale);
  if (!f.checkpoint.empty()) {
    const Checkpoint ck = read_checkpoint(f.checkpoint);
    const ScalarField pred =
        c.precision == Precision::f32 ? predict_with<float>(ck, s) : predict_with<double>(ck, s);
    emit("pred", pred, false, f.scale);
    if (split_has_hf(split)) {
      ScalarField err(pred.grid);
      const ScalarField gt = s.hf_field();
      for (std::size_t i = 0; i < err.values.size(); ++i) err.values[i] = pred.values[i] - gt.values[i];
      emit("pred_error", err, true, f.scale);
    }
  }
  ranges.close();
  if (!ranges) throw DataError("failed writing plot ranges");
  RunManifest rm("plot");
  rm.set_all(config_to_settings(c));
  for (const auto& p : plan) rm.add(p);
  rm.write(dir, stem + "_manifest.json");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-fidelity temperature-field surrogates: data, training, evaluation."};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_file, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "override one config key (key=value); repeatable");
  app.add_flag("--dry-run", g.dry_run, "print the files a command would write and exit");
  app.add_flag("-q,--quiet", g.quiet, "no progress output");

  KeyFlags gen_f, pre_f, fin_f, eval_f, sweep_f, plot_f;
  StageFlags pre_s, fin_s;
  EvalFlags eval_s;
  PlotFlags plot_s;

  auto* gen = app.add_subcommand("gen-data", "generate a multi-fidelity dataset");
  gen_f.add(gen, "--spec", "gen.spec", "layout family: simple or complex");
  gen_f.add(gen, "--lf", "gen.lf", "labeled LF samples");
  gen_f.add(gen, "--lf-unlabeled", "gen.lf_unlabeled", "unlabeled LF samples");
  gen_f.add(gen, "--hf", "gen.hf", "HF training samples (with LF labels)");
  gen_f.add(gen, "--test", "gen.test", "test samples (LF and HF labels)");
  gen_f.add(gen, "--seed", "gen.seed", "dataset seed");
  gen_f.add(gen, "--tolerance", "gen.tolerance", "solver tolerance (K)");
  gen_f.add(gen, "--omega-lf", "gen.omega_lf", "SOR relaxation on the LF grid");
  gen_f.add(gen, "--omega-hf", "gen.omega_hf", "SOR relaxation on the HF grid");
  gen_f.add(gen, "--out", "data.dir", "dataset directory");

  auto add_train_flags = [](CLI::App* a, KeyFlags& k) {
    k.add(a, "--data", "data.dir", "dataset directory");
    k.add(a, "--precision", "train.precision", "f32 or f64");
    k.add(a, "--base-width", "unet.base_width", "U-Net base channel width");
    k.add(a, "--batch", "train.batch_pretrain", "pre-training batch size");
    k.add(a, "--keep-checkpoints", "train.keep_checkpoints", "true: checkpoint at every restart boundary");
  };

  auto* pre = app.add_subcommand("pretrain", "pre-train a backbone with the LF head");
  add_train_flags(pre, pre_f);
  pre_f.add(pre, "--epochs", "train.pretrain_epochs", "pre-training epochs");
  pre_f.add(pre, "--count", "sweep.pretrain_count", "use the first N pre-training samples (0: all)");
  pre->add_option("--mode", pre_s.mode, "dmfm or pd_dmfm")->required();
  pre->add_option("--seed", pre_s.seed, "training seed");
  pre->add_option("--out", pre_s.out, "checkpoint path")->required();
  pre->add_option("--log", pre_s.log, "training log CSV (default: <out>_log.csv)");

  auto* fin = app.add_subcommand("finetune", "attach a fresh HF head and train on HF samples");
  add_train_flags(fin, fin_f);
  fin_f.add(fin, "--epochs", "train.finetune_epochs", "fine-tuning epochs");
  fin_f.add(fin, "--batch-finetune", "train.batch_finetune", "fine-tuning batch size (0: by HF count)");
  fin->add_option("--checkpoint", fin_s.checkpoint, "pre-trained checkpoint (omit for sfm)");
  fin->add_option("--mode", fin_s.mode, "sfm, dmfm or pd_dmfm (default: from the checkpoint)");
  fin->add_option("--hf-count", fin_s.hf_count, "use the first N HF samples")->required();
  fin->add_option("--seed", fin_s.seed, "training seed");
  fin->add_option("--out", fin_s.out, "checkpoint path")->required();
  fin->add_option("--log", fin_s.log, "training log CSV (default: <out>_log.csv)");

  auto* ev = app.add_subcommand("evaluate", "score a fine-tuned checkpoint on the test split");
  eval_f.add(ev, "--data", "data.dir", "dataset directory");
  eval_f.add(ev, "--precision", "train.precision", "f32 or f64");
  eval_f.add(ev, "--test-count", "sweep.test_count", "use the first N test samples (0: all)");
  ev->add_option("--checkpoint", eval_s.checkpoint, "fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_s.out, "metrics CSV")->required();
  ev->add_option("--per-sample", eval_s.per_sample, "per-sample metrics CSV");

  auto* sw = app.add_subcommand("sweep", "train and evaluate every (mode, hf_count, seed) cell");
  add_train_flags(sw, sweep_f);
  sweep_f.add(sw, "--out-dir", "out.dir", "output directory");
  sweep_f.add(sw, "--mode,--modes", "sweep.modes", "all, or a comma list of sfm,dmfm,pd_dmfm");
  sweep_f.add(sw, "--hf-counts", "sweep.hf_counts", "comma list of HF sample counts");
  sweep_f.add(sw, "--seeds", "sweep.seeds", "comma list of training seeds");
  sweep_f.add(sw, "--epochs", "train.epochs", "epochs for both stages");
  sweep_f.add(sw, "--pretrain-epochs", "train.pretrain_epochs", "pre-training epochs");
  sweep_f.add(sw, "--finetune-epochs", "train.finetune_epochs", "fine-tuning epochs");
  sweep_f.add(sw, "--pretrain-count", "sweep.pretrain_count", "use the first N pre-training samples (0: all)");
  sweep_f.add(sw, "--test-count", "sweep.test_count", "use the first N test samples (0: all)");

  auto* pl = app.add_subcommand("plot", "render fields and error maps, or a sweep's MAE curve");
  plot_f.add(pl, "--data", "data.dir", "dataset directory");
  plot_f.add(pl, "--precision", "train.precision", "f32 or f64");
  pl->add_option("--split", plot_s.split, "lf, lf_unlabeled, hf or test");
  pl->add_option("--index", plot_s.index, "sample index within the split");
  pl->add_option("--checkpoint", plot_s.checkpoint, "fine-tuned checkpoint for prediction maps");
  pl->add_option("--out-dir", plot_s.out_dir, "image directory");
  pl->add_option("--scale", plot_s.scale, "pixels per HF cell")->check(CLI::Range(1, 16));
  pl->add_option("--sweep", plot_s.sweep, "sweep.csv to plot instead of a sample")->check(CLI::ExistingFile);
  pl->add_option("--out", plot_s.out, "image path for --sweep");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_gen_data(g, gen_f);
    if (*pre) return cmd_pretrain(g, pre_f, pre_s);
    if (*fin) return cmd_finetune(g, fin_f, fin_s);
    if (*ev) return cmd_evaluate(g, eval_f, eval_s);
    if (*sw) return cmd_sweep(g, sweep_f);
    if (*pl) return cmd_plot(g, plot_f, plot_s);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const SolverError& e) {
    std::cerr << "solver error: " << e.what() << '\n';
    return kSolver;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << '\n';
    return kTraining;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const LayoutError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const PlacementError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const GridMismatchError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const MetricError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
