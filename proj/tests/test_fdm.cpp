#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mfsurro/dataset.hpp"
#include "mfsurro/fdm.hpp"

using namespace mfsurro;

namespace {

Layout random_simple(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_layout(simple_spec(), rng);
}

struct Problem {
  ScalarField phi;
  BoundarySpec bc;
};

Problem problem(const Layout& l, int n) {
  const GridSpec g(n, l.length);
  return {rasterize_layout(l, g), make_boundary(l, g)};
}

double max_abs_diff(const ScalarField& a, const ScalarField& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

// Manufactured solution T*(x, y) = T0 + cos(pi x / L) x^2 on a unit square.
// T* has zero normal derivative on the left wall and equals T0 there, so both
// the hole and the adiabatic part are exact; the right wall carries the flux
// dT*/dx(L) = -2L, folded into the source of the last column.
double manufactured_error(int n) {
  const double L = 1.0, T0 = 298.0, k = 1.0;
  Layout l;
  l.length = L;
  l.hole_length = 0.2;
  const GridSpec g(n, L);
  const BoundarySpec bc = make_boundary(l, g);
  const double pi = std::numbers::pi, a = pi / L, h = g.spacing();
  ScalarField phi(g), exact(g);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double x = g.center(c);
      const double lap = -a * a * std::cos(a * x) * x * x - 4.0 * a * std::sin(a * x) * x + 2.0 * std::cos(a * x);
      phi.at(r, c) = -k * lap;
      if (c == n - 1) phi.at(r, c) += k * (-2.0 * L) / h;
      exact.at(r, c) = T0 + std::cos(a * x) * x * x;
    }
  SolverConfig cfg{1e-12, 2000000, 1.95, 16};
  const ScalarField T = detail::sor_solve(phi, bc, cfg, nullptr, nullptr);
  return max_abs_diff(T, exact);
}

}  // namespace

TEST(Boundary, HoleCells) {
  Layout l;
  const BoundarySpec lf = make_boundary(l, {50, 0.1});
  EXPECT_EQ(lf.hole_begin, 22);
  EXPECT_EQ(lf.hole_cells(), 6);
  const BoundarySpec hf = make_boundary(l, {200, 0.1});
  EXPECT_EQ(hf.hole_begin, 90);
  EXPECT_EQ(hf.hole_cells(), 20);
  l.hole_length = 1e-4;
  EXPECT_THROW(make_boundary(l, {50, 0.1}), LayoutError);
}

TEST(Solver, ZeroSourceIsUniform) {
  const auto p = problem(Layout{}, 50);
  const ScalarField T = solve_steady(p.phi, p.bc, SolverConfig{});
  for (double v : T.values) EXPECT_NEAR(v, 298.0, 1e-6);
}

TEST(Solver, ConfigValidation) {
  const auto p = problem(Layout{}, 20);
  EXPECT_THROW(solve_steady(p.phi, p.bc, SolverConfig{1e-9, 100, 2.0, 16}), ConfigError);
  EXPECT_THROW(solve_steady(p.phi, p.bc, SolverConfig{0.0, 100, 1.5, 16}), ConfigError);
  ScalarField neg = p.phi;
  neg.values[3] = -1.0;
  EXPECT_THROW(solve_steady(neg, p.bc, SolverConfig{}), ConfigError);
}

TEST(Solver, NonConvergenceCarriesResidual) {
  const auto p = problem(random_simple(1), 50);
  try {
    solve_steady(p.phi, p.bc, SolverConfig{1e-9, 32, 1.9, 16});
    FAIL() << "expected SolverError";
  } catch (const SolverError& e) {
    EXPECT_GT(e.residual(), 1e-9);
    EXPECT_EQ(e.iterations(), 32u);
  }
}

TEST(Solver, MatchesDenseOracle) {
  for (std::uint64_t seed : {1, 2}) {
    const auto p = problem(random_simple(seed), 50);
    SolverConfig cfg;
    const ScalarField T = solve_steady(p.phi, p.bc, cfg);
    const ScalarField D = solve_direct_dense(p.phi, p.bc);
    EXPECT_LE(max_abs_diff(T, D), 10 * cfg.tolerance);
  }
}

TEST(Solver, DenseOracleSatisfiesStencil) {
  const auto p = problem(random_simple(4), 20);
  Layout l = random_simple(4);
  const ScalarField D = solve_direct_dense(p.phi, p.bc);
  EXPECT_LE(residual_maxnorm(D, p.phi, p.bc), 1e-10);
  EXPECT_THROW(solve_direct_dense(problem(Layout{}, 65).phi, problem(Layout{}, 65).bc), UnsupportedError);
}

TEST(Solver, ManufacturedSolutionSecondOrder) {
  const double e25 = manufactured_error(25), e50 = manufactured_error(50), e100 = manufactured_error(100);
  const double p1 = std::log2(e25 / e50), p2 = std::log2(e50 / e100);
  EXPECT_GT(p1, 1.8);
  EXPECT_LT(p1, 2.2);
  EXPECT_GT(p2, 1.8);
  EXPECT_LT(p2, 2.2);
}

TEST(Residual, ExamplesFromStencil) {
  const GridSpec g(50, 0.1);
  const BoundarySpec bc = make_boundary(Layout{}, g);
  ScalarField T(g, 298.0), phi(g, 0.0);
  EXPECT_EQ(residual_maxnorm(T, phi, bc), 0.0);
  phi.at(10, 30) = 10000.0;
  const ScalarField target = jacobi_target(T, phi, bc);
  EXPECT_NEAR(target.at(10, 30) - 298.0, 0.01, 1e-12);
  EXPECT_NEAR(residual_maxnorm(T, phi, bc), 0.01, 1e-12);
  EXPECT_THROW(residual_maxnorm(ScalarField({40, 0.1}), phi, bc), GridMismatchError);
}

TEST(Residual, ConvergedSolveWithinTolerance) {
  const auto p = problem(random_simple(7), 50);
  SolverConfig cfg;
  SolveStats st;
  const ScalarField T = solve_steady(p.phi, p.bc, cfg, nullptr, &st);
  EXPECT_LE(residual_maxnorm(T, p.phi, p.bc), cfg.tolerance);
  EXPECT_EQ(st.residual, residual_maxnorm(T, p.phi, p.bc));
}

TEST(Flux, ZeroAndBalanced) {
  const auto z = problem(Layout{}, 50);
  const FluxBalance f0 = flux_balance(ScalarField(z.phi.grid, 298.0), z.phi, z.bc);
  EXPECT_EQ(f0.generated, 0.0);
  EXPECT_EQ(f0.dissipated, 0.0);
  const auto p = problem(random_simple(3), 50);
  const ScalarField T = solve_steady(p.phi, p.bc, SolverConfig{});
  const FluxBalance fb = flux_balance(T, p.phi, p.bc);
  EXPECT_NEAR(fb.generated, 20.0, 1e-12);
  EXPECT_LT(std::abs(fb.generated - fb.dissipated) / fb.generated, 1e-6);
}

TEST(Properties, LinearityAndDoubling) {
  const auto p1 = problem(random_simple(11), 50);
  const auto p2 = problem(random_simple(12), 50);
  SolverConfig cfg;
  const ScalarField T1 = solve_steady(p1.phi, p1.bc, cfg);
  const ScalarField T2 = solve_steady(p2.phi, p2.bc, cfg);
  ScalarField mix = p1.phi;
  for (std::size_t i = 0; i < mix.values.size(); ++i) mix.values[i] = 2.0 * p1.phi.values[i] + 0.5 * p2.phi.values[i];
  const ScalarField Tm = solve_steady(mix, p1.bc, cfg);
  // the iteration error of each solve is bounded by residual * n^2 / 4
  const double bound = 10 * cfg.tolerance * 50 * 50 / 4;
  for (std::size_t i = 0; i < Tm.values.size(); ++i) {
    const double expect = 2.0 * (T1.values[i] - 298.0) + 0.5 * (T2.values[i] - 298.0);
    EXPECT_NEAR(Tm.values[i] - 298.0, expect, bound);
  }
  ScalarField dbl = p1.phi;
  for (double& v : dbl.values) v *= 2.0;
  const ScalarField Td = solve_steady(dbl, p1.bc, cfg);
  const FluxBalance a = flux_balance(T1, p1.phi, p1.bc), b = flux_balance(Td, dbl, p1.bc);
  EXPECT_NEAR(b.generated, 2.0 * a.generated, 1e-12);
  EXPECT_NEAR(b.dissipated, 2.0 * a.dissipated, 1e-6);
}

TEST(Properties, MaximumPrincipleAndMirror) {
  Layout l = random_simple(21);
  const auto p = problem(l, 50);
  SolverConfig cfg;
  const ScalarField T = solve_steady(p.phi, p.bc, cfg);
  EXPECT_GE(T.min(), 298.0 - cfg.tolerance);
  const auto argmin = std::min_element(T.values.begin(), T.values.end()) - T.values.begin();
  EXPECT_EQ(argmin % 50, 0);

  Layout mirrored = l;
  for (auto& c : mirrored.components) c.y0 = l.length - c.y1();
  const auto pm = problem(mirrored, 50);
  const ScalarField Tm = solve_steady(pm.phi, pm.bc, cfg);
  const double bound = 10 * cfg.tolerance * 50 * 50 / 4;
  for (int r = 0; r < 50; ++r)
    for (int c = 0; c < 50; ++c) EXPECT_NEAR(Tm.at(49 - r, c), T.at(r, c), bound);
}
