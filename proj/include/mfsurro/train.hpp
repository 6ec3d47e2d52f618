#pragma once

// Pre-train / fine-tune orchestration for the three training regimes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "mfsurro/dataset.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/losses.hpp"
#include "mfsurro/optim.hpp"
#include "mfsurro/unet.hpp"

namespace mfsurro {

enum class Mode { sfm, dmfm, pd_dmfm };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::sfm: return "sfm";
    case Mode::dmfm: return "dmfm";
    case Mode::pd_dmfm: return "pd_dmfm";
  }
  return "?";
}

inline std::string model_tag(Mode m) {
  switch (m) {
    case Mode::sfm: return "SFM";
    case Mode::dmfm: return "DMFM";
    case Mode::pd_dmfm: return "PD-DMFM";
  }
  return "?";
}

inline Mode parse_mode(const std::string& s) {
  if (s == "sfm") return Mode::sfm;
  if (s == "dmfm") return Mode::dmfm;
  if (s == "pd_dmfm" || s == "pd-dmfm") return Mode::pd_dmfm;
  throw ConfigError("unknown training mode '" + s + "' (expected sfm, dmfm or pd_dmfm)");
}

// Network inputs are phi / kIntensityScale; outputs are (T - T0) / kTempScale.
inline constexpr double kIntensityScale = 20000.0;
inline constexpr double kTempScale = 10.0;

/// Batch size rule for fine-tuning on `hf_count` samples.
inline int finetune_batch_size(std::size_t hf_count) {
  if (hf_count <= 200) return 1;
  if (hf_count <= 500) return 2;
  if (hf_count <= 1000) return 4;
  return 8;
}

struct TrainConfig {
  Mode mode = Mode::dmfm;
  int epochs = 150;
  int batch_pretrain = 16;
  int batch_finetune = 0;  // 0 selects finetune_batch_size(hf_count)
  double lr_backbone_pretrain = 0.01;
  double lr_backbone_finetune = 0.001;
  double lr_heads = 0.01;
  double eta_min = 1e-7;
  double restart_t0 = 10.0;
  double restart_t_mult = 2.0;
  RangerConfig ranger;
  std::uint64_t seed = 0;
  bool reset_norm_stats = false;  // reset batchnorm statistics before fine-tuning

  void validate() const {
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_pretrain < 1) throw ConfigError("batch_pretrain must be >= 1");
    if (batch_finetune < 0) throw ConfigError("batch_finetune must be >= 0");
    for (double lr : {lr_backbone_pretrain, lr_backbone_finetune, lr_heads})
      if (!(lr >= 0.0)) throw ConfigError("learning rates must be non-negative");
    schedule(lr_heads).validate();
    ranger.validate();
  }

  WarmRestarts schedule(double eta_max) const {
    return {eta_max, std::min(eta_min, eta_max), restart_t0, restart_t_mult};
  }
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double lr_backbone = 0.0;
  double lr_head = 0.0;
  double train_loss = 0.0;
  double seconds = 0.0;
};

struct TrainHistory {
  std::string stage;  // "pretrain" or "finetune"
  std::vector<EpochRecord> epochs;
  std::vector<std::filesystem::path> checkpoints;
};

struct TrainHooks {
  std::filesystem::path log_csv;         // empty: no log
  std::filesystem::path checkpoint_dir;  // empty: no restart checkpoints
  std::string tag = "model";
  std::function<void(const EpochRecord&)> on_epoch;
  std::map<std::string, std::string> checkpoint_meta;
};

/// Normalized network inputs and targets, prepared once per sample set.
struct PreparedSet {
  std::size_t count = 0;
  int lf_n = kLowFidelityCells;
  int hf_n = kHighFidelityCells;
  std::vector<float> x;     // count x lf_n^2
  std::vector<float> y_lf;  // empty when unlabeled
  std::vector<float> y_hf;  // empty when unlabeled
  std::vector<PhysicsInput> physics;

  bool has_lf() const { return !y_lf.empty() || count == 0; }
  bool has_hf() const { return !y_hf.empty() || count == 0; }
};

enum class PrepareTargets { lf, hf, physics };

inline PreparedSet prepare(const std::vector<Sample>& samples, PrepareTargets what) {
  PreparedSet p;
  p.count = samples.size();
  if (samples.empty()) return p;
  p.lf_n = samples.front().lf_n;
  p.hf_n = samples.front().hf_n;
  p.x.reserve(p.count * static_cast<std::size_t>(p.lf_n) * p.lf_n);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.lf_n != p.lf_n || s.hf_n != p.hf_n) throw DataError("samples mix grid sizes");
    const ScalarField phi = s.x_lf();
    for (double v : phi.values) p.x.push_back(static_cast<float>(v / kIntensityScale));
    const double t0 = s.layout.boundary_temp;
    auto put = [&](const std::optional<std::vector<float>>& y, std::vector<float>& dst, const char* what_label) {
      if (!y) throw DataError("sample " + std::to_string(i) + " has no " + what_label + " label");
      for (float v : *y) dst.push_back(static_cast<float>((static_cast<double>(v) - t0) / kTempScale));
    };
    switch (what) {
      case PrepareTargets::lf:
        put(s.y_lf, p.y_lf, "low-fidelity");
        break;
      case PrepareTargets::hf:
        put(s.y_hf, p.y_hf, "high-fidelity");
        break;
      case PrepareTargets::physics:
        p.physics.push_back({phi, make_boundary(s.layout, s.lf_grid())});
        break;
    }
  }
  return p;
}

namespace detail {

template <class T>
Tensor<T> gather(const std::vector<float>& src, const std::vector<std::size_t>& idx, int side) {
  const std::size_t plane = static_cast<std::size_t>(side) * side;
  Tensor<T> out({static_cast<int>(idx.size()), 1, side, side});
  for (std::size_t b = 0; b < idx.size(); ++b)
    std::transform(src.begin() + idx[b] * plane, src.begin() + (idx[b] + 1) * plane,
                   out.data.begin() + b * plane, [](float v) { return static_cast<T>(v); });
  return out;
}

// Wall-clock time stays out of the log so that reruns are byte-identical.
inline void write_log_header(std::ofstream& os) {
  os << "epoch,lr_backbone,lr_head,train_loss\n";
}

inline void write_log_row(std::ofstream& os, const EpochRecord& r) {
  os << r.epoch << ',' << format_double(r.lr_backbone) << ',' << format_double(r.lr_head) << ','
     << format_double(r.train_loss) << '\n';
  os.flush();
}

// Stream ids for derive_seed.
inline constexpr std::uint64_t kStreamShufflePretrain = 101;
inline constexpr std::uint64_t kStreamShuffleFinetune = 102;
inline constexpr std::uint64_t kStreamHeadInit = 103;

/// Shared minibatch loop. loss_fn(tape, batch indices) runs the forward
/// pass and returns the scalar loss.
template <class T, class LossFn>
TrainHistory run_epochs(Network<T>& net, std::size_t count, int batch, int epochs, double lr_backbone,
                        double lr_head, const TrainConfig& cfg, std::uint64_t shuffle_stream,
                        const std::string& stage, const TrainHooks& hooks, LossFn loss_fn) {
  TrainHistory hist;
  hist.stage = stage;
  std::ofstream log;
  if (!hooks.log_csv.empty()) {
    log.open(hooks.log_csv, std::ios::trunc);
    if (!log) throw DataError("cannot open training log '" + hooks.log_csv.string() + "'");
    write_log_header(log);
  }
  if (epochs == 0 || count == 0) return hist;

  Ranger<T> opt({net.backbone_parameters(), net.head_parameters()}, cfg.ranger);
  const WarmRestarts sb = cfg.schedule(lr_backbone), sh = cfg.schedule(lr_head);
  const std::vector<int> restarts = restart_epochs(epochs, sb);
  std::mt19937_64 rng(derive_seed(cfg.seed, shuffle_stream, 0));
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t iters = (count + batch - 1) / batch;

  for (int e = 0; e < epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr_backbone = lr_at(e, sb);
    rec.lr_head = lr_at(e, sh);
    double loss_sum = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      const std::size_t b0 = it * batch, b1 = std::min(count, b0 + batch);
      const std::vector<std::size_t> idx(order.begin() + b0, order.begin() + b1);
      const double t = e + static_cast<double>(it) / static_cast<double>(iters);
      net.zero_grad();
      Tape<T> tape;
      const Var loss = loss_fn(tape, idx);
      const double value = static_cast<double>(tape.value(loss).data[0]);
      if (!std::isfinite(value))
        throw TrainingError(stage + ": non-finite loss at epoch " + std::to_string(e + 1) + ", iteration " +
                            std::to_string(it + 1));
      tape.backward(loss);
      opt.step({lr_at(t, sb), lr_at(t, sh)});
      loss_sum += value * static_cast<double>(idx.size());
    }
    rec.train_loss = loss_sum / static_cast<double>(count);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    hist.epochs.push_back(rec);
    if (log.is_open()) write_log_row(log, rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    const bool boundary = std::find(restarts.begin(), restarts.end(), e + 1) != restarts.end();
    if (boundary && !hooks.checkpoint_dir.empty()) {
      auto meta = hooks.checkpoint_meta;
      meta["stage"] = stage;
      meta["epoch"] = std::to_string(e + 1);
      const auto path = hooks.checkpoint_dir / (hooks.tag + "_" + stage + "_epoch" + std::to_string(e + 1) + ".mfwt");
      write_checkpoint(path, net.to_checkpoint(meta));
      hist.checkpoints.push_back(path);
    }
  }
  return hist;
}

}  // namespace detail

/// Fresh network for `cfg.seed`; the LF head is attached for pre-training.
template <class T>
Network<T> build_network(const UNetConfig& ucfg, std::uint64_t seed, HeadKind head = HeadKind::lf) {
  std::mt19937_64 rng(derive_seed(seed, 100, 0));
  return Network<T>(ucfg, head, rng);
}

/// Minimizes the LF supervised loss (dmfm) or the physics loss (pd_dmfm).
template <class T>
TrainHistory pretrain(Network<T>& net, const std::vector<Sample>& samples, const TrainConfig& cfg,
                      const TrainHooks& hooks = {}) {
  cfg.validate();
  if (cfg.mode == Mode::sfm) throw ConfigError("sfm has no pre-training stage");
  if (net.head_kind() != HeadKind::lf) throw ConfigError("pre-training needs the LF head attached");
  const bool physics = cfg.mode == Mode::pd_dmfm;
  if (!physics)
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (!samples[i].y_lf) throw DataError("dmfm pre-training sample " + std::to_string(i) + " lacks an LF label");
  const PreparedSet data = prepare(samples, physics ? PrepareTargets::physics : PrepareTargets::lf);
  const int side = data.lf_n;
  auto loss_fn = [&](Tape<T>& tape, const std::vector<std::size_t>& idx) {
    const Var out = net.forward(tape, tape.constant(detail::gather<T>(data.x, idx, side)), NormMode::train);
    if (!physics) return loss_mae(tape, out, detail::gather<T>(data.y_lf, idx, side));
    std::vector<const PhysicsInput*> inputs;
    for (std::size_t i : idx) inputs.push_back(&data.physics[i]);
    return loss_physics(tape, affine(tape, out, static_cast<T>(kTempScale), T(0)), inputs);
  };
  return detail::run_epochs(net, data.count, cfg.batch_pretrain, cfg.epochs, cfg.lr_backbone_pretrain,
                            cfg.lr_heads, cfg, detail::kStreamShufflePretrain, "pretrain", hooks, loss_fn);
}

/// Attaches a fresh HF head and trains backbone and head on HF labels.
template <class T>
TrainHistory finetune(Network<T>& net, const std::vector<Sample>& samples, const TrainConfig& cfg,
                      const TrainHooks& hooks = {}) {
  cfg.validate();
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (!samples[i].y_hf) throw DataError("fine-tuning sample " + std::to_string(i) + " lacks an HF label");
  std::mt19937_64 rng(derive_seed(cfg.seed, detail::kStreamHeadInit, 0));
  net.swap_head(HeadKind::hf, rng);
  if (cfg.reset_norm_stats) net.reset_norm_stats();
  const PreparedSet data = prepare(samples, PrepareTargets::hf);
  const int batch = cfg.batch_finetune > 0 ? cfg.batch_finetune : finetune_batch_size(samples.size());
  auto loss_fn = [&](Tape<T>& tape, const std::vector<std::size_t>& idx) {
    const Var out = net.forward(tape, tape.constant(detail::gather<T>(data.x, idx, data.lf_n)), NormMode::train);
    return loss_mae(tape, out, detail::gather<T>(data.y_hf, idx, data.hf_n));
  };
  return detail::run_epochs(net, data.count, batch, cfg.epochs, cfg.lr_backbone_finetune, cfg.lr_heads, cfg,
                            detail::kStreamShuffleFinetune, "finetune", hooks, loss_fn);
}

}  // namespace mfsurro
