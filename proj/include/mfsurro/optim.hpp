#pragma once

// Ranger (RAdam inner steps with LookAhead slow weights) and the cosine
// annealing schedule with warm restarts.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <vector>

#include "mfsurro/error.hpp"
#include "mfsurro/tensor.hpp"

namespace mfsurro {

struct RangerConfig {
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
  int lookahead_k = 6;
  double lookahead_alpha = 0.5;
  double sma_threshold = 5.0;  // rectified step once rho_t exceeds this

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must be in [0, 1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must be in (0, 1)");
    if (!(eps > 0.0)) throw ConfigError("eps must be positive");
    if (lookahead_k < 1) throw ConfigError("lookahead_k must be >= 1");
    if (!(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0)) throw ConfigError("lookahead_alpha must be in (0, 1]");
  }
};

/// Optimizer state over a fixed list of parameters split into groups with
/// their own learning rates.
template <class T>
class Ranger {
 public:
  Ranger(std::vector<std::vector<Parameter<T>*>> groups, RangerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    for (std::size_t g = 0; g < groups.size(); ++g)
      for (Parameter<T>* p : groups[g]) {
        Slot s;
        s.param = p;
        s.group = g;
        s.m.assign(p->value.size(), 0.0);
        s.v.assign(p->value.size(), 0.0);
        s.slow.assign(p->value.data.begin(), p->value.data.end());
        slots_.push_back(std::move(s));
      }
    groups_ = groups.size();
  }

  std::size_t step_count() const { return t_; }
  const RangerConfig& config() const { return cfg_; }

  /// One update with lr[g] for group g, reading each Parameter::grad.
  void step(const std::vector<double>& lr) {
    if (lr.size() != groups_) throw ConfigError("one learning rate per parameter group is required");
    for (const Slot& s : slots_)
      for (std::size_t i = 0; i < s.param->grad.size(); ++i)
        if (!std::isfinite(static_cast<double>(s.param->grad.data[i])))
          throw TrainingError("non-finite gradient in '" + s.param->name + "' at element " +
                              std::to_string(i) + " (step " + std::to_string(t_ + 1) + ")");
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double b2t = std::pow(b2, static_cast<double>(t_));
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const bool rectified = rho_t > cfg_.sma_threshold;
    double step_size;
    if (rectified) {
      step_size = std::sqrt((1.0 - b2t) * (rho_t - 4.0) / (rho_inf - 4.0) * (rho_t - 2.0) / rho_t *
                            rho_inf / (rho_inf - 2.0)) /
                  bias1;
    } else {
      step_size = 1.0 / bias1;
    }
    const bool sync = t_ % static_cast<std::size_t>(cfg_.lookahead_k) == 0;
    for (Slot& s : slots_) {
      const double a = lr[s.group] * step_size;
      T* w = s.param->value.data.data();
      const T* g = s.param->grad.data.data();
      const std::size_t n = s.m.size();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g[i];
        s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
        s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
        double wi = w[i];
        if (rectified)
          wi -= a * s.m[i] / (std::sqrt(s.v[i]) + cfg_.eps);
        else
          wi -= a * s.m[i];
        if (sync) {
          s.slow[i] += cfg_.lookahead_alpha * (wi - s.slow[i]);
          wi = s.slow[i];
        }
        w[i] = static_cast<T>(wi);
      }
    }
  }

 private:
  struct Slot {
    Parameter<T>* param = nullptr;
    std::size_t group = 0;
    std::vector<double> m, v, slow;
  };

  RangerConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t groups_ = 0;
  std::size_t t_ = 0;
};

struct WarmRestarts {
  double eta_max = 0.01;
  double eta_min = 1e-7;
  double t0 = 10.0;      // epochs in the first period
  double t_mult = 2.0;   // period growth factor

  void validate() const {
    if (!(t0 > 0.0)) throw ConfigError("restart period t0 must be positive");
    if (!(t_mult >= 1.0)) throw ConfigError("t_mult must be >= 1");
    if (!(eta_min >= 0.0 && eta_max >= eta_min)) throw ConfigError("need 0 <= eta_min <= eta_max");
  }
};

struct RestartPosition {
  int index = 0;        // restart number i
  double start = 0.0;   // epoch where period i starts
  double length = 0.0;  // T_i
  double t_cur = 0.0;   // epochs since the start of period i
};

inline RestartPosition restart_position(double t, const WarmRestarts& s) {
  s.validate();
  if (!(t >= 0.0)) throw ConfigError("schedule time must be non-negative");
  RestartPosition p;
  p.length = s.t0;
  while (t >= p.start + p.length) {
    p.start += p.length;
    p.length *= s.t_mult;
    ++p.index;
  }
  p.t_cur = t - p.start;
  return p;
}

/// eta_min + (eta_max - eta_min) (1 + cos(pi t_cur / t_i)) / 2
inline double cosine_lr(double eta_max, double eta_min, double t_cur, double t_i) {
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * t_cur / t_i));
}

/// Learning rate at fractional epoch t; restart boundaries belong to the new period.
inline double lr_at(double t, const WarmRestarts& s) {
  const RestartPosition p = restart_position(t, s);
  return cosine_lr(s.eta_max, s.eta_min, p.t_cur, p.length);
}

/// Value at the end of restart period i (t_cur = T_i).
inline double lr_at_period_end(int i, const WarmRestarts& s) {
  s.validate();
  return cosine_lr(s.eta_max, s.eta_min, s.t0 * std::pow(s.t_mult, i), s.t0 * std::pow(s.t_mult, i));
}

/// Epochs in (0, epochs] where a new period begins.
inline std::vector<int> restart_epochs(int epochs, const WarmRestarts& s) {
  s.validate();
  std::vector<int> out;
  double start = 0.0, len = s.t0;
  while (start + len <= epochs) {
    start += len;
    len *= s.t_mult;
    out.push_back(static_cast<int>(std::lround(start)));
  }
  return out;
}

}  // namespace mfsurro
