#pragma once

// Experiment configuration: flat `key=value` text with dotted keys. Values
// are applied in order (config file first, then command-line flags), so a
// later setting of the same key wins.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mfsurro/dataset.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/train.hpp"
#include "mfsurro/unet.hpp"

namespace mfsurro {

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

inline Precision parse_precision(const std::string& s) {
  if (s == "f32" || s == "float32") return Precision::f32;
  if (s == "f64" || s == "float64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected f32 or f64)");
}

inline const std::vector<std::size_t> kDefaultHfCounts = {10, 20, 30, 40, 50, 100, 200, 500, 1000, 2000};

struct GenConfig {
  LayoutKind spec = LayoutKind::simple;
  std::size_t lf = 0, lf_unlabeled = 0, hf = 0, test = 0;
  std::uint64_t seed = 0;
  double tolerance = 1e-9;
  double omega_lf = 1.9;
  double omega_hf = 1.995;

  DatasetManifest manifest() const {
    DatasetManifest m;
    m.spec = spec;
    m.seed = seed;
    m.counts = {{Split::lf, lf}, {Split::lf_unlabeled, lf_unlabeled}, {Split::hf, hf}, {Split::test, test}};
    m.solvers.lf.tolerance = m.solvers.hf.tolerance = tolerance;
    m.solvers.lf.omega = omega_lf;
    m.solvers.hf.omega = omega_hf;
    return m;
  }
};

struct ExperimentConfig {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "runs";
  GenConfig gen;
  std::vector<Mode> modes = {Mode::sfm, Mode::dmfm, Mode::pd_dmfm};
  std::vector<std::size_t> hf_counts = kDefaultHfCounts;
  std::vector<std::uint64_t> seeds = {0};
  std::size_t pretrain_count = 0;  // 0 uses the whole pre-training split
  std::size_t test_count = 0;      // 0 uses the whole test split
  int pretrain_epochs = 150;
  int finetune_epochs = 150;
  TrainConfig train;  // mode, seed and epochs are set per run
  UNetConfig unet;
  Precision precision = Precision::f32;
  bool keep_checkpoints = false;  // restart-boundary checkpoints

  void validate() const {
    if (modes.empty()) throw ConfigError("no training modes selected");
    if (hf_counts.empty()) throw ConfigError("hf_counts is empty");
    for (std::size_t c : hf_counts)
      if (c == 0) throw ConfigError("hf_counts entries must be positive");
    if (seeds.empty()) throw ConfigError("no seeds selected");
    if (pretrain_epochs < 0 || finetune_epochs < 0) throw ConfigError("epochs must be non-negative");
    train.validate();
    unet.validate();
  }

  TrainConfig stage_config(Mode mode, std::uint64_t seed, bool pretraining) const {
    TrainConfig c = train;
    c.mode = mode;
    c.seed = seed;
    c.epochs = pretraining ? pretrain_epochs : finetune_epochs;
    return c;
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) {
    const auto a = item.find_first_not_of(" \t"), b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("'" + key + "' expects a non-negative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (...) {
    throw ConfigError("'" + key + "' is out of range: '" + v + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  const std::uint64_t u = parse_uint(key, v);
  if (u > 1000000000ull) throw ConfigError("'" + key + "' is out of range: '" + v + "'");
  return static_cast<int>(u);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (...) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true or false, got '" + v + "'");
}

}  // namespace detail

inline std::vector<Mode> parse_modes(const std::string& v) {
  if (v == "all") return {Mode::sfm, Mode::dmfm, Mode::pd_dmfm};
  std::vector<Mode> out;
  for (const auto& s : detail::split_list(v)) {
    try {
      out.push_back(parse_mode(s));
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }
  if (out.empty()) throw ConfigError("empty mode list");
  return out;
}

inline std::vector<std::size_t> parse_counts(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& s : detail::split_list(v)) out.push_back(detail::parse_uint(key, s));
  return out;
}

/// Applies one setting; unknown keys are errors.
inline void apply_setting(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  TrainConfig& t = c.train;
  RangerConfig& r = c.train.ranger;
  if (key == "data.dir") c.data_dir = v;
  else if (key == "out.dir") c.out_dir = v;
  else if (key == "gen.spec") c.gen.spec = parse_layout_kind(v);
  else if (key == "gen.lf") c.gen.lf = parse_uint(key, v);
  else if (key == "gen.lf_unlabeled") c.gen.lf_unlabeled = parse_uint(key, v);
  else if (key == "gen.hf") c.gen.hf = parse_uint(key, v);
  else if (key == "gen.test") c.gen.test = parse_uint(key, v);
  else if (key == "gen.seed") c.gen.seed = parse_uint(key, v);
  else if (key == "gen.tolerance") c.gen.tolerance = parse_real(key, v);
  else if (key == "gen.omega_lf") c.gen.omega_lf = parse_real(key, v);
  else if (key == "gen.omega_hf") c.gen.omega_hf = parse_real(key, v);
  else if (key == "sweep.modes") c.modes = parse_modes(v);
  else if (key == "sweep.hf_counts") c.hf_counts = parse_counts(key, v);
  else if (key == "sweep.seeds") {
    c.seeds.clear();
    for (std::size_t s : parse_counts(key, v)) c.seeds.push_back(s);
  } else if (key == "sweep.pretrain_count") c.pretrain_count = parse_uint(key, v);
  else if (key == "sweep.test_count") c.test_count = parse_uint(key, v);
  else if (key == "train.epochs") c.pretrain_epochs = c.finetune_epochs = parse_int(key, v);
  else if (key == "train.pretrain_epochs") c.pretrain_epochs = parse_int(key, v);
  else if (key == "train.finetune_epochs") c.finetune_epochs = parse_int(key, v);
  else if (key == "train.batch_pretrain") t.batch_pretrain = parse_int(key, v);
  else if (key == "train.batch_finetune") t.batch_finetune = parse_int(key, v);
  else if (key == "train.lr_backbone_pretrain") t.lr_backbone_pretrain = parse_real(key, v);
  else if (key == "train.lr_backbone_finetune") t.lr_backbone_finetune = parse_real(key, v);
  else if (key == "train.lr_heads") t.lr_heads = parse_real(key, v);
  else if (key == "train.eta_min") t.eta_min = parse_real(key, v);
  else if (key == "train.restart_t0") t.restart_t0 = parse_real(key, v);
  else if (key == "train.restart_t_mult") t.restart_t_mult = parse_real(key, v);
  else if (key == "train.reset_norm_stats") t.reset_norm_stats = parse_bool(key, v);
  else if (key == "train.precision") c.precision = parse_precision(v);
  else if (key == "train.keep_checkpoints") c.keep_checkpoints = parse_bool(key, v);
  else if (key == "ranger.beta1") r.beta1 = parse_real(key, v);
  else if (key == "ranger.beta2") r.beta2 = parse_real(key, v);
  else if (key == "ranger.eps") r.eps = parse_real(key, v);
  else if (key == "ranger.lookahead_k") r.lookahead_k = parse_int(key, v);
  else if (key == "ranger.lookahead_alpha") r.lookahead_alpha = parse_real(key, v);
  else if (key == "ranger.sma_threshold") r.sma_threshold = parse_real(key, v);
  else if (key == "unet.base_width") c.unet.base_width = parse_int(key, v);
  else if (key == "unet.head_width") c.unet.head_width = parse_int(key, v);
  else if (key == "unet.pool") c.unet.pool = pool_from_string(v);
  else if (key == "unet.norm_eps") c.unet.norm_eps = parse_real(key, v);
  else if (key == "unet.norm_momentum") c.unet.norm_momentum = parse_real(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_settings(ExperimentConfig& c, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) apply_setting(c, k, v);
}

inline std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path.string() + "'");
  return parse_key_values(is, path.string());
}

namespace detail {
template <class V>
std::string join(const std::vector<V>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
}  // namespace detail

/// Every key accepted by apply_setting with its effective value; reading
/// the result back reproduces the configuration.
inline std::map<std::string, std::string> config_to_settings(const ExperimentConfig& c) {
  using detail::format_double;
  std::string modes;
  for (std::size_t i = 0; i < c.modes.size(); ++i) modes += (i ? "," : "") + to_string(c.modes[i]);
  const TrainConfig& t = c.train;
  const RangerConfig& r = t.ranger;
  return {{"data.dir", c.data_dir.string()},
          {"out.dir", c.out_dir.string()},
          {"gen.spec", to_string(c.gen.spec)},
          {"gen.lf", std::to_string(c.gen.lf)},
          {"gen.lf_unlabeled", std::to_string(c.gen.lf_unlabeled)},
          {"gen.hf", std::to_string(c.gen.hf)},
          {"gen.test", std::to_string(c.gen.test)},
          {"gen.seed", std::to_string(c.gen.seed)},
          {"gen.tolerance", format_double(c.gen.tolerance)},
          {"gen.omega_lf", format_double(c.gen.omega_lf)},
          {"gen.omega_hf", format_double(c.gen.omega_hf)},
          {"sweep.modes", modes},
          {"sweep.hf_counts", detail::join(c.hf_counts)},
          {"sweep.seeds", detail::join(c.seeds)},
          {"sweep.pretrain_count", std::to_string(c.pretrain_count)},
          {"sweep.test_count", std::to_string(c.test_count)},
          {"train.pretrain_epochs", std::to_string(c.pretrain_epochs)},
          {"train.finetune_epochs", std::to_string(c.finetune_epochs)},
          {"train.batch_pretrain", std::to_string(t.batch_pretrain)},
          {"train.batch_finetune", std::to_string(t.batch_finetune)},
          {"train.lr_backbone_pretrain", format_double(t.lr_backbone_pretrain)},
          {"train.lr_backbone_finetune", format_double(t.lr_backbone_finetune)},
          {"train.lr_heads", format_double(t.lr_heads)},
          {"train.eta_min", format_double(t.eta_min)},
          {"train.restart_t0", format_double(t.restart_t0)},
          {"train.restart_t_mult", format_double(t.restart_t_mult)},
          {"train.reset_norm_stats", t.reset_norm_stats ? "true" : "false"},
          {"train.precision", to_string(c.precision)},
          {"train.keep_checkpoints", c.keep_checkpoints ? "true" : "false"},
          {"ranger.beta1", format_double(r.beta1)},
          {"ranger.beta2", format_double(r.beta2)},
          {"ranger.eps", format_double(r.eps)},
          {"ranger.lookahead_k", std::to_string(r.lookahead_k)},
          {"ranger.lookahead_alpha", format_double(r.lookahead_alpha)},
          {"ranger.sma_threshold", format_double(r.sma_threshold)},
          {"unet.base_width", std::to_string(c.unet.base_width)},
          {"unet.head_width", std::to_string(c.unet.head_width)},
          {"unet.pool", to_string(c.unet.pool)},
          {"unet.norm_eps", format_double(c.unet.norm_eps)},
          {"unet.norm_momentum", format_double(c.unet.norm_momentum)}};
}

}  // namespace mfsurro
