#pragma once

// Experiment pipeline: pre-training, fine-tuning and evaluation over a grid
// of (mode, hf_count, seed) cells, with a machine-readable record of every
// emitted file.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mfsurro/binary.hpp"
#include "mfsurro/config.hpp"
#include "mfsurro/dataset.hpp"
#include "mfsurro/metrics.hpp"
#include "mfsurro/plot.hpp"
#include "mfsurro/train.hpp"
#include "mfsurro/unet.hpp"

namespace mfsurro {

namespace fs = std::filesystem;

// --- run manifest ---------------------------------------------------------------

/// Files written by one command, with sizes and CRC32s.
class RunManifest {
 public:
  explicit RunManifest(std::string command) : command_(std::move(command)) {}

  void set(const std::string& key, const std::string& value) { settings_[key] = value; }
  void set_all(const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) settings_[k] = v;
  }
  void add(const fs::path& file) {
    if (std::find(files_.begin(), files_.end(), file) == files_.end()) files_.push_back(file);
  }
  const std::vector<fs::path>& files() const { return files_; }

  /// Writes the manifest (default `run_manifest.json`) into dir; paths are
  /// recorded relative to dir where possible.
  fs::path write(const fs::path& dir, const std::string& name = "run_manifest.json") const {
    nlohmann::ordered_json j;
    j["command"] = command_;
    j["settings"] = settings_;
    j["files"] = nlohmann::ordered_json::array();
    for (const auto& f : files_) {
      std::ifstream is(f, std::ios::binary);
      if (!is) throw DataError("emitted file '" + f.string() + "' is missing");
      std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
      std::error_code ec;
      const fs::path rel = fs::relative(f, dir, ec);
      nlohmann::ordered_json e;
      e["path"] = (ec || rel.empty() ? f : rel).generic_string();
      e["bytes"] = bytes.size();
      e["crc32"] = crc32_of(bytes.data(), bytes.size());
      j["files"].push_back(e);
    }
    fs::create_directories(dir);
    const fs::path out = dir / name;
    std::ofstream os(out, std::ios::trunc);
    if (!os) throw DataError("cannot write '" + out.string() + "'");
    os << j.dump(2) << '\n';
    if (!os) throw DataError("failed writing '" + out.string() + "'");
    return out;
  }

 private:
  std::string command_;
  std::map<std::string, std::string> settings_;
  std::vector<fs::path> files_;
};

// --- data -----------------------------------------------------------------------

struct ExperimentData {
  std::vector<Sample> lf, lf_unlabeled, hf, test;
};

inline std::vector<Sample> take_first(std::vector<Sample> v, std::size_t n) {
  if (n > 0 && n < v.size()) v.resize(n);
  return v;
}

/// Loads the splits the configured modes need and checks the counts.
inline ExperimentData load_experiment_data(const ExperimentConfig& c) {
  if (!fs::exists(c.data_dir / "manifest.txt"))
    throw DataError("no dataset manifest in '" + c.data_dir.string() + "'");
  ExperimentData d;
  const auto need = [&](Mode m) { return std::find(c.modes.begin(), c.modes.end(), m) != c.modes.end(); };
  auto pretrain_split = [&](Split s, const char* what) {
    std::vector<Sample> v = load_split(c.data_dir, s);
    if (v.empty()) throw DataError(std::string("dataset has no ") + what + " samples for pre-training");
    if (c.pretrain_count > v.size())
      throw ConfigError("pretrain_count " + std::to_string(c.pretrain_count) + " exceeds the " +
                        std::to_string(v.size()) + " available " + what + " samples");
    return take_first(std::move(v), c.pretrain_count);
  };
  if (need(Mode::dmfm)) d.lf = pretrain_split(Split::lf, "labeled LF");
  if (need(Mode::pd_dmfm)) d.lf_unlabeled = pretrain_split(Split::lf_unlabeled, "unlabeled LF");
  d.hf = load_split(c.data_dir, Split::hf);
  const std::size_t max_count = *std::max_element(c.hf_counts.begin(), c.hf_counts.end());
  if (max_count > d.hf.size())
    throw ConfigError("hf_count " + std::to_string(max_count) + " exceeds the " + std::to_string(d.hf.size()) +
                      " available HF samples");
  d.test = load_split(c.data_dir, Split::test);
  if (c.test_count > d.test.size())
    throw ConfigError("test_count " + std::to_string(c.test_count) + " exceeds the " +
                      std::to_string(d.test.size()) + " available test samples");
  d.test = take_first(std::move(d.test), c.test_count);
  if (d.test.empty()) throw DataError("dataset has no test samples");
  return d;
}

// --- file naming ----------------------------------------------------------------

inline std::string run_name(Mode m, std::uint64_t seed) { return to_string(m) + "_seed" + std::to_string(seed); }

inline std::string cell_name(Mode m, std::size_t hf_count, std::uint64_t seed) {
  return to_string(m) + "_hf" + std::to_string(hf_count) + "_seed" + std::to_string(seed);
}

struct SweepPaths {
  fs::path root;
  fs::path pretrain_checkpoint(Mode m, std::uint64_t s) const { return root / "pretrain" / (run_name(m, s) + ".mfwt"); }
  fs::path pretrain_log(Mode m, std::uint64_t s) const { return root / "pretrain" / (run_name(m, s) + "_log.csv"); }
  fs::path cell_log(Mode m, std::size_t n, std::uint64_t s) const {
    return root / "cells" / (cell_name(m, n, s) + "_log.csv");
  }
  fs::path cell_metrics(Mode m, std::size_t n, std::uint64_t s) const {
    return root / "cells" / (cell_name(m, n, s) + "_metrics.csv");
  }
  fs::path cell_checkpoint(Mode m, std::size_t n, std::uint64_t s) const {
    return root / "cells" / (cell_name(m, n, s) + ".mfwt");
  }
  fs::path sweep_csv() const { return root / "sweep.csv"; }
  fs::path summary_csv() const { return root / "sweep_median.csv"; }
  fs::path plot() const { return root / "sweep_mae.ppm"; }
};

// --- parallel helper ------------------------------------------------------------

/// Runs fn(i) for i in [0, n) on up to `threads` workers; the first failing
/// index (in index order) is rethrown.
inline void parallel_tasks(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  std::vector<std::exception_ptr> errors(n);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// --- stages ---------------------------------------------------------------------

using ProgressFn = std::function<void(const std::string&)>;

inline TrainHooks stage_hooks(const ExperimentConfig& c, const fs::path& log, const std::string& tag,
                              const fs::path& ck_dir, const ProgressFn& progress) {
  TrainHooks h;
  h.log_csv = log;
  h.tag = tag;
  if (c.keep_checkpoints) h.checkpoint_dir = ck_dir;
  if (progress)
    h.on_epoch = [progress, tag](const EpochRecord& r) {
      std::ostringstream os;
      os << tag << " epoch " << r.epoch << " loss " << r.train_loss << " (" << r.seconds << " s)";
      progress(os.str());
    };
  return h;
}

/// Pre-trains a fresh network; `samples` are labeled LF for dmfm and
/// unlabeled LF for pd_dmfm.
template <class T>
Network<T> pretrain_stage(const ExperimentConfig& c, Mode mode, std::uint64_t seed, const std::vector<Sample>& samples,
                          const TrainHooks& hooks, TrainHistory* history = nullptr) {
  Network<T> net = build_network<T>(c.unet, seed);
  TrainHistory h = pretrain(net, samples, c.stage_config(mode, seed, true), hooks);
  if (history) *history = std::move(h);
  return net;
}

/// Fine-tunes `net` (pre-trained, or fresh for sfm) on the first hf_count
/// HF samples and evaluates it on the test set.
template <class T>
MetricsReport finetune_and_evaluate(const ExperimentConfig& c, Mode mode, std::size_t hf_count, std::uint64_t seed,
                                    Network<T> net, const ExperimentData& d, const TrainHooks& hooks,
                                    Network<T>* trained = nullptr) {
  const std::vector<Sample> hf(d.hf.begin(), d.hf.begin() + static_cast<std::ptrdiff_t>(hf_count));
  finetune(net, hf, c.stage_config(mode, seed, false), hooks);
  MetricsReport r = evaluate(net, d.test);
  r.model = model_tag(mode);
  r.hf_count = hf_count;
  r.seed = seed;
  if (trained) *trained = std::move(net);
  return r;
}

// --- sweep ----------------------------------------------------------------------

struct SweepCell {
  Mode mode;
  std::size_t hf_count;
  std::uint64_t seed;
};

inline std::vector<SweepCell> sweep_cells(const ExperimentConfig& c) {
  std::vector<SweepCell> cells;
  for (Mode m : c.modes)
    for (std::size_t n : c.hf_counts)
      for (std::uint64_t s : c.seeds) cells.push_back({m, n, s});
  return cells;
}

inline std::vector<std::pair<Mode, std::uint64_t>> pretrain_runs(const ExperimentConfig& c) {
  std::vector<std::pair<Mode, std::uint64_t>> runs;
  for (Mode m : c.modes)
    if (m != Mode::sfm)
      for (std::uint64_t s : c.seeds) runs.emplace_back(m, s);
  return runs;
}

/// Files a sweep writes, in manifest order.
inline std::vector<fs::path> plan_sweep(const ExperimentConfig& c) {
  const SweepPaths p{c.out_dir};
  std::vector<fs::path> files;
  for (auto [m, s] : pretrain_runs(c)) {
    files.push_back(p.pretrain_log(m, s));
    files.push_back(p.pretrain_checkpoint(m, s));
  }
  for (const SweepCell& cell : sweep_cells(c)) {
    files.push_back(p.cell_log(cell.mode, cell.hf_count, cell.seed));
    files.push_back(p.cell_metrics(cell.mode, cell.hf_count, cell.seed));
    if (c.keep_checkpoints) files.push_back(p.cell_checkpoint(cell.mode, cell.hf_count, cell.seed));
  }
  files.push_back(p.sweep_csv());
  files.push_back(p.summary_csv());
  files.push_back(p.plot());
  return files;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw MetricError("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct SweepSummaryRow {
  std::string model;
  std::size_t hf_count = 0;
  std::size_t seeds = 0;
  double median_mae = 0.0, median_cmae = 0.0, median_mt_ae = 0.0;
  double mean_mae = 0.0;
};

/// Per (model, hf_count) statistics over seeds, in first-appearance order.
inline std::vector<SweepSummaryRow> summarize(const std::vector<MetricsReport>& rows) {
  std::vector<SweepSummaryRow> out;
  std::vector<std::vector<const MetricsReport*>> groups;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const SweepSummaryRow& s) { return s.model == r.model && s.hf_count == r.hf_count; });
    if (it == out.end()) {
      out.push_back({r.model, r.hf_count});
      groups.emplace_back();
      it = out.end() - 1;
    }
    groups[static_cast<std::size_t>(it - out.begin())].push_back(&r);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::vector<double> a, b, c;
    for (const auto* r : groups[i]) {
      a.push_back(r->mae);
      b.push_back(r->cmae);
      c.push_back(r->mt_ae);
    }
    out[i].seeds = a.size();
    out[i].median_mae = median(a);
    out[i].median_cmae = median(b);
    out[i].median_mt_ae = median(c);
    double s = 0.0;
    for (double v : a) s += v;
    out[i].mean_mae = s / static_cast<double>(a.size());
  }
  return out;
}

inline void write_summary_csv(const fs::path& path, const std::vector<SweepSummaryRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << "model,hf_count,seeds,median_mae,median_cmae,median_mt_ae,mean_mae\n";
  for (const auto& r : rows)
    os << r.model << ',' << r.hf_count << ',' << r.seeds << ',' << detail::format_double(r.median_mae) << ','
       << detail::format_double(r.median_cmae) << ',' << detail::format_double(r.median_mt_ae) << ','
       << detail::format_double(r.mean_mae) << '\n';
  if (!os) throw DataError("failed writing '" + path.string() + "'");
}

/// Median MAE against hf_count, one line per model.
inline Image render_sweep_plot(const std::vector<SweepSummaryRow>& rows) {
  std::vector<PlotSeries> series;
  for (const auto& r : rows) {
    auto it = std::find_if(series.begin(), series.end(), [&](const PlotSeries& s) { return s.name == r.model; });
    if (it == series.end()) {
      const std::size_t k = series.size();
      Rgb color = kSeriesColors[k % kSeriesColors.size()];
      if (r.model == "SFM") color = kSeriesColors[0];
      if (r.model == "DMFM") color = kSeriesColors[1];
      if (r.model == "PD-DMFM") color = kSeriesColors[2];
      series.push_back({r.model, color, {}});
      it = series.end() - 1;
    }
    it->points.emplace_back(static_cast<double>(r.hf_count), r.median_mae);
  }
  for (auto& s : series) std::sort(s.points.begin(), s.points.end());
  return render_line_plot(series);
}

struct SweepResult {
  std::vector<MetricsReport> rows;  // mode, hf_count, seed order
  std::vector<SweepSummaryRow> summary;
  std::map<std::string, TrainHistory> pretrain_histories;  // by run_name
  std::map<std::string, double> seconds;  // wall time by run_name (pre-training) or cell_name
};

template <class T>
SweepResult run_sweep_as(const ExperimentConfig& c, const ExperimentData& d, RunManifest& manifest,
                         const ProgressFn& progress, unsigned threads) {
  const SweepPaths p{c.out_dir};
  fs::create_directories(c.out_dir / "pretrain");
  fs::create_directories(c.out_dir / "cells");
  SweepResult result;

  const auto runs = pretrain_runs(c);
  std::vector<std::optional<Network<T>>> pretrained(runs.size());
  std::vector<TrainHistory> histories(runs.size());
  std::vector<double> pretrain_seconds(runs.size()), cell_seconds;
  parallel_tasks(runs.size(), threads, [&](std::size_t i) {
    const auto [m, s] = runs[i];
    const auto& samples = m == Mode::dmfm ? d.lf : d.lf_unlabeled;
    const TrainHooks hooks = stage_hooks(c, p.pretrain_log(m, s), run_name(m, s), c.out_dir / "pretrain", progress);
    const auto start = std::chrono::steady_clock::now();
    pretrained[i] = pretrain_stage<T>(c, m, s, samples, hooks, &histories[i]);
    write_checkpoint(p.pretrain_checkpoint(m, s), pretrained[i]->to_checkpoint({{"mode", to_string(m)},
                                                                                 {"seed", std::to_string(s)}}));
    pretrain_seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  });
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto [m, s] = runs[i];
    manifest.add(p.pretrain_log(m, s));
    manifest.add(p.pretrain_checkpoint(m, s));
    for (const auto& ck : histories[i].checkpoints) manifest.add(ck);
    result.pretrain_histories[run_name(m, s)] = histories[i];
    result.seconds[run_name(m, s)] = pretrain_seconds[i];
  }

  const auto cells = sweep_cells(c);
  std::vector<MetricsReport> reports(cells.size());
  cell_seconds.resize(cells.size());
  parallel_tasks(cells.size(), threads, [&](std::size_t i) {
    const SweepCell& cell = cells[i];
    const auto started = std::chrono::steady_clock::now();
    Network<T> start = build_network<T>(c.unet, cell.seed);
    if (cell.mode != Mode::sfm) {
      const auto it = std::find(runs.begin(), runs.end(), std::make_pair(cell.mode, cell.seed));
      start = *pretrained[static_cast<std::size_t>(it - runs.begin())];
    }
    const std::string name = cell_name(cell.mode, cell.hf_count, cell.seed);
    const TrainHooks hooks =
        stage_hooks(c, p.cell_log(cell.mode, cell.hf_count, cell.seed), name, c.out_dir / "cells", progress);
    Network<T> trained = start;
    reports[i] = finetune_and_evaluate(c, cell.mode, cell.hf_count, cell.seed, std::move(start), d, hooks, &trained);
    write_metrics_csv(p.cell_metrics(cell.mode, cell.hf_count, cell.seed), {reports[i]});
    if (c.keep_checkpoints) {
      const auto ck = p.cell_checkpoint(cell.mode, cell.hf_count, cell.seed);
      write_checkpoint(ck, trained.to_checkpoint({{"mode", to_string(cell.mode)},
                                                  {"hf_count", std::to_string(cell.hf_count)},
                                                  {"seed", std::to_string(cell.seed)}}));
    }
    cell_seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (progress) {
      std::ostringstream os;
      os << name << " test mae " << reports[i].mae << " cmae " << reports[i].cmae << " mt_ae " << reports[i].mt_ae;
      progress(os.str());
    }
  });
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const SweepCell& cell = cells[i];
    manifest.add(p.cell_log(cell.mode, cell.hf_count, cell.seed));
    manifest.add(p.cell_metrics(cell.mode, cell.hf_count, cell.seed));
    if (c.keep_checkpoints) manifest.add(p.cell_checkpoint(cell.mode, cell.hf_count, cell.seed));
    result.seconds[cell_name(cell.mode, cell.hf_count, cell.seed)] = cell_seconds[i];
  }
  // restart checkpoints of fine-tuning, if any were kept
  if (c.keep_checkpoints)
    for (const auto& e : fs::directory_iterator(c.out_dir / "cells"))
      if (e.path().filename().string().find("_finetune_epoch") != std::string::npos) manifest.add(e.path());

  result.rows = std::move(reports);
  result.summary = summarize(result.rows);
  write_metrics_csv(p.sweep_csv(), result.rows);
  write_summary_csv(p.summary_csv(), result.summary);
  write_ppm(p.plot(), render_sweep_plot(result.summary));
  manifest.add(p.sweep_csv());
  manifest.add(p.summary_csv());
  manifest.add(p.plot());
  return result;
}

/// Runs every configured cell and writes the merged CSVs, the plot and the
/// run manifest.
inline SweepResult run_sweep(const ExperimentConfig& c, const ProgressFn& progress = {},
                             unsigned threads = worker_threads()) {
  c.validate();
  const ExperimentData d = load_experiment_data(c);
  RunManifest manifest("sweep");
  manifest.set_all(config_to_settings(c));
  SweepResult r = c.precision == Precision::f32 ? run_sweep_as<float>(c, d, manifest, progress, threads)
                                                : run_sweep_as<double>(c, d, manifest, progress, threads);
  manifest.write(c.out_dir);
  return r;
}

}  // namespace mfsurro
