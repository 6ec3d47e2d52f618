#pragma once

// Finite-difference steady heat conduction on a cell-centered grid:
//
//   4 T_c - sum(neighbors) = dx^2 * phi_c / k
//
// Walls are adiabatic (mirror ghost, T_ghost = T_c). The hole on the left
// wall is isothermal at the face (T_ghost = 2 T0 - T_c).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "mfsurro/error.hpp"
#include "mfsurro/field.hpp"

namespace mfsurro {

struct BoundarySpec {
  int hole_begin = 0;  // first hole row (inclusive)
  int hole_end = 0;    // one past the last hole row
  double hole_temp = 298.0;
  double conductivity = 1.0;

  bool is_hole(int row) const { return row >= hole_begin && row < hole_end; }
  int hole_cells() const { return hole_end - hole_begin; }
};

/// Hole rows are those whose cell centers fall in the closed interval
/// [L/2 - delta/2, L/2 + delta/2].
inline BoundarySpec make_boundary(const Layout& layout, const GridSpec& grid) {
  const double lo = layout.hole_center() - 0.5 * layout.hole_length;
  const double hi = layout.hole_center() + 0.5 * layout.hole_length;
  const double eps = 1e-6 * grid.spacing();
  BoundarySpec bc;
  bc.hole_temp = layout.boundary_temp;
  bc.conductivity = layout.conductivity;
  bc.hole_begin = grid.n;
  bc.hole_end = 0;
  for (int row = 0; row < grid.n; ++row) {
    const double y = grid.center(row);
    if (y >= lo - eps && y <= hi + eps) {
      bc.hole_begin = std::min(bc.hole_begin, row);
      bc.hole_end = std::max(bc.hole_end, row + 1);
    }
  }
  if (bc.hole_end <= bc.hole_begin)
    throw LayoutError("hole is narrower than one cell on a " + std::to_string(grid.n) + " grid");
  return bc;
}

struct SolverConfig {
  double tolerance = 1e-9;       // bound on the fixed-point residual and the error estimate (K)
  std::size_t max_iters = 500000;
  double omega = 1.9;
  std::size_t check_every = 16;  // sweeps between residual evaluations

  void validate() const {
    if (!(tolerance > 0.0)) throw ConfigError("solver tolerance must be positive");
    if (!(omega > 0.0 && omega < 2.0)) throw ConfigError("SOR omega must lie in (0, 2)");
    if (max_iters == 0) throw ConfigError("solver max_iters must be positive");
    if (check_every == 0) throw ConfigError("solver check_every must be positive");
  }
};

struct SolveStats {
  std::size_t iterations = 0;
  double residual = 0.0;
  double error_estimate = 0.0;  // estimated max-norm distance to the discrete solution (K)
};

namespace detail {

// Stencil of one cell after ghost elimination:
//   diag * T_c - neighbor_sum = source + dirichlet * 2 T0
// with mirror ghosts folded into diag (-1 each) and Dirichlet ghosts (+1 each).
struct CellStencil {
  double neighbor_sum;
  int mirror;
  int dirichlet;
};

template <class Get>
inline CellStencil cell_stencil(int n, int row, int col, const BoundarySpec& bc, Get&& get) {
  CellStencil s{0.0, 0, 0};
  if (col > 0) {
    s.neighbor_sum += get(row, col - 1);
  } else if (bc.is_hole(row)) {
    ++s.dirichlet;
  } else {
    ++s.mirror;
  }
  if (col < n - 1) s.neighbor_sum += get(row, col + 1); else ++s.mirror;
  if (row > 0) s.neighbor_sum += get(row - 1, col); else ++s.mirror;
  if (row < n - 1) s.neighbor_sum += get(row + 1, col); else ++s.mirror;
  return s;
}

inline void require_bc_fits(const GridSpec& grid, const BoundarySpec& bc) {
  if (bc.hole_begin < 0 || bc.hole_end > grid.n || bc.hole_end <= bc.hole_begin)
    throw ConfigError("boundary hole rows do not fit the grid");
  if (!(bc.conductivity > 0.0)) throw ConfigError("conductivity must be positive");
}

}  // namespace detail

/// One-step Jacobi reconstruction 1/4 (dx^2 phi / k + ghost-closed neighbor
/// sum) for every cell. A field is a discrete solution iff it equals its own
/// target.
inline ScalarField jacobi_target(const ScalarField& T, const ScalarField& intensity,
                                 const BoundarySpec& bc) {
  require_same_grid(T, intensity, "jacobi_target");
  detail::require_bc_fits(T.grid, bc);
  const int n = T.n();
  const double scale = T.grid.spacing() * T.grid.spacing() / bc.conductivity;
  ScalarField out(T.grid);
  auto get = [&](int r, int c) { return T.at(r, c); };
  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < n; ++col) {
      const auto s = detail::cell_stencil(n, row, col, bc, get);
      const double tc = T.at(row, col);
      const double ghosts = s.mirror * tc + s.dirichlet * (2.0 * bc.hole_temp - tc);
      out.at(row, col) = 0.25 * (scale * intensity.at(row, col) + s.neighbor_sum + ghosts);
    }
  }
  return out;
}

inline double residual_maxnorm(const ScalarField& T, const ScalarField& intensity,
                               const BoundarySpec& bc) {
  const ScalarField target = jacobi_target(T, intensity, bc);
  double worst = 0.0;
  for (std::size_t i = 0; i < T.values.size(); ++i)
    worst = std::max(worst, std::abs(T.values[i] - target.values[i]));
  return worst;
}

namespace detail {

// Red-black SOR without the sign precondition on the source; signed sources
// arise in manufactured-solution checks.
inline ScalarField sor_solve(const ScalarField& intensity, const BoundarySpec& bc,
                             const SolverConfig& cfg, const ScalarField* initial,
                             SolveStats* stats) {
  cfg.validate();
  require_bc_fits(intensity.grid, bc);

  const int n = intensity.n();
  const double scale = intensity.grid.spacing() * intensity.grid.spacing() / bc.conductivity;
  ScalarField T(intensity.grid, bc.hole_temp);
  if (initial) {
    require_same_grid(*initial, intensity, "solve_steady initial guess");
    T.values = initial->values;
  }

  // Precomputed inverse diagonal and constant right-hand side per cell.
  std::vector<double> inv_diag(intensity.grid.cells()), rhs(intensity.grid.cells());
  {
    auto zero = [](int, int) { return 0.0; };
    for (int row = 0; row < n; ++row) {
      for (int col = 0; col < n; ++col) {
        const auto s = detail::cell_stencil(n, row, col, bc, zero);
        const std::size_t i = static_cast<std::size_t>(row) * n + col;
        inv_diag[i] = 1.0 / (4.0 - s.mirror + s.dirichlet);
        rhs[i] = scale * intensity.values[i] + 2.0 * bc.hole_temp * s.dirichlet;
      }
    }
  }

  const double omega = cfg.omega;
  double* t = T.values.data();
  auto sweep_color = [&](int color) {
    for (int row = 0; row < n; ++row) {
      const bool top = row == 0, bottom = row == n - 1;
      double* cur = t + static_cast<std::size_t>(row) * n;
      const double* up = top ? nullptr : cur - n;
      const double* down = bottom ? nullptr : cur + n;
      const std::size_t base = static_cast<std::size_t>(row) * n;
      for (int col = (row + color) & 1; col < n; col += 2) {
        double sum = 0.0;
        if (col > 0) sum += cur[col - 1];
        if (col < n - 1) sum += cur[col + 1];
        if (up) sum += up[col];
        if (down) sum += down[col];
        const double gs = (sum + rhs[base + col]) * inv_diag[base + col];
        cur[col] += omega * (gs - cur[col]);
      }
    }
  };

  // Stop once both the fixed-point residual and the estimated distance to the
  // discrete solution are within tolerance. The residual alone understates
  // the error of the slowly decaying smooth mode by a factor ~n^2/6; the
  // estimate rho/(1-rho) * |last sweep update| uses the contraction rate rho
  // observed over the last kRateWindow checks. On fine grids the estimate can
  // demand an update below the rounding floor, so the solve also stops when
  // the residual is within tolerance and the update has stopped shrinking over
  // kStallWindow checks.
  constexpr std::size_t kRateWindow = 8, kStallWindow = 32;
  std::vector<double> before(T.values.size());
  std::vector<std::pair<std::size_t, double>> history;  // (sweeps, update) per check
  double residual = residual_maxnorm(T, intensity, bc);
  double estimate = residual == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  bool stalled = false;
  std::size_t it = 0;
  while (!(residual <= cfg.tolerance && (estimate <= cfg.tolerance || stalled))) {
    if (it >= cfg.max_iters) {
      if (stats) *stats = {it, residual, estimate};
      throw SolverError("SOR did not converge within " + std::to_string(cfg.max_iters) +
                            " sweeps (residual " + std::to_string(residual) + " K)",
                        residual, it);
    }
    const std::size_t burst = std::min(cfg.check_every, cfg.max_iters - it);
    for (std::size_t k = 0; k < burst; ++k) {
      if (k + 1 == burst) std::copy(T.values.begin(), T.values.end(), before.begin());
      sweep_color(0);
      sweep_color(1);
    }
    it += burst;
    double update = 0.0;
    for (std::size_t i = 0; i < before.size(); ++i)
      update = std::max(update, std::abs(T.values[i] - before[i]));
    residual = residual_maxnorm(T, intensity, bc);
    if (!std::isfinite(residual))
      throw SolverError("SOR diverged", residual, it);
    history.emplace_back(it, update);
    const std::size_t m = history.size() - 1;
    if (update == 0.0) {
      estimate = 0.0;
    } else if (m >= 1) {
      const auto [it0, u0] = history[m - std::min(m, kRateWindow)];
      if (update < u0) {
        const double rho = std::pow(update / u0, 1.0 / static_cast<double>(it - it0));
        estimate = update * rho / (1.0 - rho);
      } else {
        estimate = std::numeric_limits<double>::infinity();
      }
    }
    stalled = m >= kStallWindow && update > 0.5 * history[m - kStallWindow].second;
  }
  if (stats) *stats = {it, residual, estimate};
  return T;
}

}  // namespace detail

/// Red-black SOR on the ghost-eliminated system. Starts from `initial` when
/// given (must share the grid), else from the uniform hole temperature.
inline ScalarField solve_steady(const ScalarField& intensity, const BoundarySpec& bc,
                                const SolverConfig& cfg, const ScalarField* initial = nullptr,
                                SolveStats* stats = nullptr) {
  for (double v : intensity.values)
    if (!(v >= 0.0)) throw ConfigError("solve_steady requires non-negative intensity");
  return detail::sor_solve(intensity, bc, cfg, initial, stats);
}

/// Dense assembly and Cholesky solve of the same system. Exact up to
/// rounding; intended as a reference for grids up to 64 x 64.
inline ScalarField solve_direct_dense(const ScalarField& intensity, const BoundarySpec& bc) {
  detail::require_bc_fits(intensity.grid, bc);
  const int n = intensity.n();
  if (n > 64) throw UnsupportedError("dense direct solve is limited to n <= 64");
  const int m = n * n;
  const double scale = intensity.grid.spacing() * intensity.grid.spacing() / bc.conductivity;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(m, m);
  Eigen::VectorXd b(m);
  auto idx = [n](int r, int c) { return r * n + c; };
  for (int row = 0; row < n; ++row) {
    for (int col = 0; col < n; ++col) {
      const int i = idx(row, col);
      double diag = 0.0;
      b(i) = scale * intensity.at(row, col);
      const int nbr[4][2] = {{row, col - 1}, {row, col + 1}, {row - 1, col}, {row + 1, col}};
      for (const auto& p : nbr) {
        const int r = p[0], c = p[1];
        if (r >= 0 && r < n && c >= 0 && c < n) {
          diag += 1.0;
          A(i, idx(r, c)) -= 1.0;
        } else if (c < 0 && bc.is_hole(row)) {
          // face Dirichlet: flux 2 (T_c - T0)
          diag += 2.0;
          b(i) += 2.0 * bc.hole_temp;
        }
        // adiabatic walls contribute nothing
      }
      A(i, i) = diag;
    }
  }
  Eigen::LLT<Eigen::MatrixXd> llt(A);
  if (llt.info() != Eigen::Success) throw SolverError("dense system is not SPD", 0.0, 0);
  Eigen::VectorXd x = llt.solve(b);
  ScalarField T(intensity.grid);
  for (int i = 0; i < m; ++i) T.values[i] = x(i);
  return T;
}

struct FluxBalance {
  double generated = 0.0;   // W per unit depth
  double dissipated = 0.0;  // W per unit depth
};

inline FluxBalance flux_balance(const ScalarField& T, const ScalarField& intensity,
                                const BoundarySpec& bc) {
  require_same_grid(T, intensity, "flux_balance");
  detail::require_bc_fits(T.grid, bc);
  const double dx = T.grid.spacing();
  FluxBalance out;
  for (double v : intensity.values) out.generated += v * dx * dx;
  for (int row = bc.hole_begin; row < bc.hole_end; ++row)
    out.dissipated += bc.conductivity * (T.at(row, 0) - bc.hole_temp) * 2.0;
  return out;
}

}  // namespace mfsurro
