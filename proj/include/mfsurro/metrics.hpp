#pragma once

// Field metrics and test-set evaluation. All metrics run in double on
// kelvin fields.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mfsurro/dataset.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/field.hpp"
#include "mfsurro/train.hpp"
#include "mfsurro/unet.hpp"

namespace mfsurro {

namespace detail {
inline void require_metric_pair(const ScalarField& a, const ScalarField& b) {
  require_same_grid(a, b, "metric");
  if (a.values.empty()) throw MetricError("metric on an empty field");
}
}  // namespace detail

/// Mean absolute error over all cells.
inline double mae(const ScalarField& pred, const ScalarField& gt) {
  detail::require_metric_pair(pred, gt);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) s += std::abs(pred.values[i] - gt.values[i]);
  return s / static_cast<double>(pred.values.size());
}

/// Mean absolute error over the cells where mask is 1.
inline double cmae(const ScalarField& pred, const ScalarField& gt, const ScalarField& mask) {
  detail::require_metric_pair(pred, gt);
  require_same_grid(pred, mask, "cmae mask");
  double s = 0.0, count = 0.0;
  for (std::size_t i = 0; i < pred.values.size(); ++i) {
    if (mask.values[i] != 0.0 && mask.values[i] != 1.0) throw MetricError("cmae mask must be binary");
    if (mask.values[i] == 1.0) {
      s += std::abs(pred.values[i] - gt.values[i]);
      count += 1.0;
    }
  }
  if (count == 0.0) throw MetricError("cmae is undefined for an all-zero mask");
  return s / count;
}

/// Absolute error of the field maxima.
inline double mt_ae(const ScalarField& pred, const ScalarField& gt) {
  detail::require_metric_pair(pred, gt);
  return std::abs(pred.max() - gt.max());
}

/// hf - bilinear(lf) on the HF grid.
inline ScalarField interp_error_map(const ScalarField& lf, const ScalarField& hf) {
  const ScalarField up = upsample_bilinear(lf, hf.grid);
  ScalarField out(hf.grid);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = hf.values[i] - up.values[i];
  return out;
}

/// Median of |values|.
inline double median_abs(const ScalarField& f) {
  if (f.values.empty()) throw MetricError("median of an empty field");
  std::vector<double> a(f.values.size());
  std::transform(f.values.begin(), f.values.end(), a.begin(), [](double v) { return std::abs(v); });
  const std::size_t mid = a.size() / 2;
  std::nth_element(a.begin(), a.begin() + mid, a.end());
  if (a.size() % 2) return a[mid];
  const double hi = a[mid];
  return 0.5 * (hi + *std::max_element(a.begin(), a.begin() + mid));
}

struct MetricsReport {
  std::string model;  // SFM, DMFM or PD-DMFM
  std::size_t hf_count = 0;
  std::uint64_t seed = 0;
  double mae = 0.0;
  double cmae = 0.0;
  double mt_ae = 0.0;
  std::vector<double> per_mae, per_cmae, per_mt_ae;

  std::size_t n_samples() const { return per_mae.size(); }
};

/// Any predictor mapping a sample to its HF temperature field in kelvin.
using FieldPredictor = std::function<ScalarField(const Sample&)>;

inline MetricsReport evaluate_predictor(const FieldPredictor& predict, const std::vector<Sample>& test) {
  if (test.empty()) throw MetricError("evaluation on an empty test set");
  MetricsReport r;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const Sample& s = test[i];
    if (!s.y_hf) throw DataError("test sample " + std::to_string(i) + " lacks an HF label");
    const ScalarField gt = s.hf_field();
    const ScalarField pred = predict(s);
    r.per_mae.push_back(mae(pred, gt));
    r.per_cmae.push_back(cmae(pred, gt, s.mask_hf()));
    r.per_mt_ae.push_back(mt_ae(pred, gt));
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  r.mae = mean(r.per_mae);
  r.cmae = mean(r.per_cmae);
  r.mt_ae = mean(r.per_mt_ae);
  return r;
}

/// Eval-mode HF prediction in kelvin, one sample at a time.
template <class T>
ScalarField predict_hf(Network<T>& net, const Sample& s) {
  if (net.head_kind() != HeadKind::hf) throw ConfigError("evaluation needs the HF head attached");
  const ScalarField phi = s.x_lf();
  Tensor<T> x({1, 1, phi.n(), phi.n()});
  for (std::size_t i = 0; i < phi.values.size(); ++i) x.data[i] = static_cast<T>(phi.values[i] / kIntensityScale);
  const Tensor<T> y = net.predict(x);
  ScalarField out(s.hf_grid());
  if (y.size() != out.values.size()) throw ShapeError("network output does not match the HF grid");
  for (std::size_t i = 0; i < y.size(); ++i)
    out.values[i] = s.layout.boundary_temp + kTempScale * static_cast<double>(y.data[i]);
  return out;
}

template <class T>
MetricsReport evaluate(Network<T>& net, const std::vector<Sample>& test) {
  return evaluate_predictor([&](const Sample& s) { return predict_hf(net, s); }, test);
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << "model,hf_count,seed,n_samples,mae,cmae,mt_ae\n";
  for (const auto& r : rows)
    os << r.model << ',' << r.hf_count << ',' << r.seed << ',' << r.n_samples() << ','
       << detail::format_double(r.mae) << ',' << detail::format_double(r.cmae) << ','
       << detail::format_double(r.mt_ae) << '\n';
  if (!os) throw DataError("failed writing '" + path.string() + "'");
}

/// Reads rows written by write_metrics_csv; per-sample vectors stay empty.
inline std::vector<MetricsReport> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != "model,hf_count,seed,n_samples,mae,cmae,mt_ae")
    throw FormatError("'" + path.string() + "' is not a metrics CSV");
  std::vector<MetricsReport> rows;
  for (int lineno = 2; std::getline(is, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t comma; (comma = line.find(',', start)) != std::string::npos; start = comma + 1)
      f.push_back(line.substr(start, comma - start));
    f.push_back(line.substr(start));
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 7) throw FormatError(where + ": expected 7 fields");
    MetricsReport r;
    try {
      r.model = f[0];
      r.hf_count = std::stoull(f[1]);
      r.seed = std::stoull(f[2]);
      r.mae = detail::parse_double(f[4], "mae");
      r.cmae = detail::parse_double(f[5], "cmae");
      r.mt_ae = detail::parse_double(f[6], "mt_ae");
    } catch (const std::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_per_sample_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os << "sample,mae,cmae,mt_ae\n";
  for (std::size_t i = 0; i < r.n_samples(); ++i)
    os << i << ',' << detail::format_double(r.per_mae[i]) << ',' << detail::format_double(r.per_cmae[i]) << ','
       << detail::format_double(r.per_mt_ae[i]) << '\n';
  if (!os) throw DataError("failed writing '" + path.string() + "'");
}

}  // namespace mfsurro
