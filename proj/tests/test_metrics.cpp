#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <unistd.h>

#include "mfsurro/metrics.hpp"

using namespace mfsurro;
namespace fs = std::filesystem;

namespace {

ScalarField random_field(int n, std::uint64_t seed, double lo = 290.0, double hi = 340.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ScalarField f(GridSpec(n, 0.1));
  for (double& v : f.values) v = u(rng);
  return f;
}

ScalarField shifted(ScalarField f, double c) {
  for (double& v : f.values) v += c;
  return f;
}

Sample labeled_test_sample(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Sample s;
  s.layout = sample_layout(simple_spec(), rng);
  SolverConfig cfg{1e-7, 500000, 1.995, 16};
  const GridSpec hf = s.hf_grid();
  s.y_hf = to_float32(solve_steady(rasterize_layout(s.layout, hf), make_boundary(s.layout, hf), cfg));
  return s;
}

}  // namespace

TEST(Metrics, MaeExamples) {
  const ScalarField a = random_field(50, 1);
  EXPECT_EQ(mae(a, a), 0.0);
  ScalarField b(GridSpec(50, 0.1), 298.0), c(GridSpec(50, 0.1), 298.5);
  EXPECT_EQ(mae(c, b), 0.5);

  const ScalarField p = random_field(50, 2), q = random_field(50, 3);
  double s = 0.0;
  for (int r = 0; r < 50; ++r)
    for (int k = 0; k < 50; ++k) s += std::abs(p.at(r, k) - q.at(r, k));
  EXPECT_NEAR(mae(p, q), s / 2500.0, 1e-12);
  EXPECT_EQ(mae(p, q), mae(q, p));
  EXPECT_THROW(mae(p, random_field(40, 4)), GridMismatchError);
}

TEST(Metrics, CmaeExamples) {
  const GridSpec g(10, 0.1);
  ScalarField gt(g, 300.0), pred(g, 300.0), mask(g, 0.0);
  const int cells[4][2] = {{1, 1}, {1, 2}, {5, 7}, {9, 0}};
  for (int i = 0; i < 4; ++i) {
    mask.at(cells[i][0], cells[i][1]) = 1.0;
    pred.at(cells[i][0], cells[i][1]) += i + 1.0;
  }
  EXPECT_EQ(cmae(pred, gt, mask), 2.5);

  ScalarField outside(g, 300.0);
  outside.at(0, 0) = 305.0;
  EXPECT_EQ(cmae(outside, gt, mask), 0.0);

  EXPECT_THROW(cmae(pred, gt, ScalarField(g, 0.0)), MetricError);
  ScalarField fuzzy = mask;
  fuzzy.at(3, 3) = 0.5;
  EXPECT_THROW(cmae(pred, gt, fuzzy), MetricError);
}

TEST(Metrics, CmaeAllOnesEqualsMae) {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    const ScalarField a = random_field(50, seed), b = random_field(50, seed + 100);
    EXPECT_EQ(cmae(a, b, ScalarField(a.grid, 1.0)), mae(a, b));
  }
}

TEST(Metrics, MtAeExamples) {
  const ScalarField a = random_field(50, 5);
  EXPECT_EQ(mt_ae(a, a), 0.0);
  EXPECT_NEAR(mt_ae(shifted(a, -0.75), a), 0.75, 1e-12);

  ScalarField gt(GridSpec(50, 0.1), 300.0);
  gt.at(10, 10) = 310.0;
  ScalarField spike = gt;
  spike.at(40, 3) = 311.3;
  EXPECT_NEAR(mt_ae(spike, gt), 1.3, 1e-12);
  EXPECT_EQ(mt_ae(spike, gt), mt_ae(gt, spike));
}

TEST(Metrics, ConstantShiftInvariance) {
  const ScalarField a = random_field(50, 6), b = random_field(50, 7);
  ScalarField mask(a.grid, 0.0);
  for (int i = 0; i < 50; ++i) mask.at(i, (i * 7) % 50) = 1.0;
  const double c = 12.5;
  EXPECT_NEAR(mae(shifted(a, c), shifted(b, c)), mae(a, b), 1e-12);
  EXPECT_NEAR(cmae(shifted(a, c), shifted(b, c), mask), cmae(a, b, mask), 1e-12);
  EXPECT_NEAR(mt_ae(shifted(a, c), shifted(b, c)), mt_ae(a, b), 1e-12);
}

TEST(Metrics, InterpErrorMap) {
  const ScalarField lf(GridSpec(50, 0.1), 301.0), hf(GridSpec(200, 0.1), 301.0);
  const ScalarField e = interp_error_map(lf, hf);
  EXPECT_EQ(e.grid, hf.grid);
  for (double v : e.values) EXPECT_EQ(v, 0.0);

  const ScalarField same = random_field(50, 8);
  for (double v : interp_error_map(same, same).values) EXPECT_EQ(v, 0.0);
}

TEST(Metrics, MedianAbs) {
  ScalarField f(GridSpec(2, 0.1), std::vector<double>{-4.0, 1.0, 3.0, -2.0});
  EXPECT_EQ(median_abs(f), 2.5);
  ScalarField odd(GridSpec(3, 0.1), std::vector<double>{9, -1, 2, 8, -7, 3, 4, 5, 6});
  EXPECT_EQ(median_abs(odd), 5.0);
}

TEST(Evaluate, OracleAndConstantPredictors) {
  std::vector<Sample> test = {labeled_test_sample(31), labeled_test_sample(32)};
  const MetricsReport perfect = evaluate_predictor([](const Sample& s) { return s.hf_field(); }, test);
  EXPECT_EQ(perfect.n_samples(), 2u);
  EXPECT_EQ(perfect.mae, 0.0);
  EXPECT_EQ(perfect.cmae, 0.0);
  EXPECT_EQ(perfect.mt_ae, 0.0);

  const MetricsReport flat =
      evaluate_predictor([](const Sample& s) { return ScalarField(s.hf_grid(), 298.0); }, test);
  double expected = 0.0;
  for (const Sample& s : test) {
    double sum = 0.0;
    for (float v : *s.y_hf) sum += std::abs(static_cast<double>(v) - 298.0);
    expected += sum / static_cast<double>(s.y_hf->size());
  }
  EXPECT_NEAR(flat.mae, expected / 2.0, 1e-9);
  EXPECT_NEAR(flat.mae, 0.5 * (flat.per_mae[0] + flat.per_mae[1]), 1e-15);

  EXPECT_THROW(evaluate_predictor([](const Sample& s) { return s.hf_field(); }, {}), MetricError);
  test[1].y_hf.reset();
  EXPECT_THROW(evaluate_predictor([](const Sample& s) { return ScalarField(s.hf_grid(), 298.0); }, test),
               DataError);
}

TEST(Evaluate, NetworkPredictionAndReports) {
  std::vector<Sample> test = {labeled_test_sample(41)};
  UNetConfig cfg;
  cfg.base_width = 4;
  auto net = build_network<float>(cfg, 1);
  EXPECT_THROW(evaluate(net, test), ConfigError);
  std::mt19937_64 rng(2);
  net.swap_head(HeadKind::hf, rng);
  MetricsReport r = evaluate(net, test);
  EXPECT_EQ(r.n_samples(), 1u);
  EXPECT_TRUE(std::isfinite(r.mae));
  EXPECT_GE(r.mae, 0.0);
  EXPECT_GE(r.cmae, 0.0);
  EXPECT_GE(r.mt_ae, 0.0);
  EXPECT_EQ(evaluate(net, test).mae, r.mae);

  r.model = "DMFM";
  r.hf_count = 20;
  r.seed = 3;
  const fs::path p = fs::temp_directory_path() / ("mfsurro_metrics_" + std::to_string(::getpid()) + ".csv");
  write_metrics_csv(p, {r, r});
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  std::string header, row;
  std::getline(ss, header);
  std::getline(ss, row);
  EXPECT_EQ(header, "model,hf_count,seed,n_samples,mae,cmae,mt_ae");
  EXPECT_EQ(row.rfind("DMFM,20,3,1,", 0), 0u);
  fs::remove(p);
}
