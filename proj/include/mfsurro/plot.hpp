#pragma once

// Binary PPM (P6) images: temperature fields, error maps and the MAE vs
// HF-count line plot. No text rendering; axis ranges go to a sidecar CSV.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mfsurro/colormap.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/field.hpp"

namespace mfsurro {

using Rgb = std::array<std::uint8_t, 3>;

struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, top row first

  Image() = default;
  Image(int w, int h, Rgb fill = {255, 255, 255}) : width(w), height(h), rgb(3 * std::size_t(w) * h) {
    if (w < 1 || h < 1) throw ConfigError("image dimensions must be positive");
    for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + i);
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t o = 3 * (std::size_t(y) * width + x);
    std::copy(c.begin(), c.end(), rgb.begin() + o);
  }
  Rgb get(int x, int y) const {
    const std::size_t o = 3 * (std::size_t(y) * width + x);
    return {rgb[o], rgb[o + 1], rgb[o + 2]};
  }
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) set(x, y, c);
  }
};

inline std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.rgb.begin(), img.rgb.end());
  return out;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  const auto bytes = encode_ppm(img);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing '" + path.string() + "'");
}

/// Colormap index for v on [lo, hi], clamped; a degenerate range maps to 0.
inline Rgb colormap(double v, double lo, double hi) {
  if (!(hi > lo)) return kViridis[0];
  const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
  return kViridis[static_cast<std::size_t>(std::lround(t * 255.0))];
}

/// Field image with `scale` pixels per cell and a vertical colorbar on the
/// right (minimum at the bottom). Row 0 of the grid is drawn at the bottom so
/// that y points up.
inline Image render_field(const ScalarField& f, double lo, double hi, int scale = 1) {
  if (scale < 1) throw ConfigError("plot scale must be >= 1");
  const int n = f.n(), side = n * scale, bar = std::max(8, side / 16), gap = std::max(2, side / 64);
  Image img(side + gap + bar, side);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      img.fill_rect(c * scale, (n - 1 - r) * scale, (c + 1) * scale, (n - r) * scale, colormap(f.at(r, c), lo, hi));
  for (int y = 0; y < side; ++y) {
    const double t = side > 1 ? 1.0 - static_cast<double>(y) / (side - 1) : 0.0;
    img.fill_rect(side + gap, y, side + gap + bar, y + 1, colormap(t, 0.0, 1.0));
  }
  return img;
}

inline Image render_field(const ScalarField& f, int scale = 1) { return render_field(f, f.min(), f.max(), scale); }

/// Signed maps use a range symmetric about zero so that the colormap middle
/// marks zero error.
inline Image render_error_map(const ScalarField& e, int scale = 1) {
  double m = 0.0;
  for (double v : e.values) m = std::max(m, std::abs(v));
  return render_field(e, -m, m, scale);
}

struct PlotSeries {
  std::string name;
  Rgb color;
  std::vector<std::pair<double, double>> points;  // (x > 0, y)
};

// Series colors in drawing order: SFM, DMFM, PD-DMFM, then repeats.
inline constexpr std::array<Rgb, 3> kSeriesColors = {{{214, 39, 40}, {31, 119, 180}, {44, 160, 44}}};

struct PlotAxes {
  double x_min = 1.0, x_max = 10.0;  // log scale
  double y_min = 0.0, y_max = 1.0;   // linear
};

inline PlotAxes line_plot_axes(const std::vector<PlotSeries>& series) {
  PlotAxes a{1e300, -1e300, 0.0, -1e300};
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (!(x > 0.0)) throw ConfigError("line plot x values must be positive");
      a.x_min = std::min(a.x_min, x);
      a.x_max = std::max(a.x_max, x);
      a.y_max = std::max(a.y_max, y);
    }
  if (a.x_min > a.x_max) return PlotAxes{};
  if (a.x_max <= a.x_min) {
    a.x_min /= 2.0;
    a.x_max *= 2.0;
  }
  if (!(a.y_max > 0.0)) a.y_max = 1.0;
  a.y_max *= 1.05;
  return a;
}

namespace detail {
inline void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c, int thick = 1) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    img.fill_rect(x0 - thick / 2, y0 - thick / 2, x0 - thick / 2 + thick, y0 - thick / 2 + thick, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}
}  // namespace detail

/// Log-x line plot with square markers, tick marks at every data x, ten y
/// tick marks from zero, and a legend of color swatches (series order)
/// in the top-right corner.
inline Image render_line_plot(const std::vector<PlotSeries>& series, int width = 640, int height = 480) {
  const PlotAxes a = line_plot_axes(series);
  Image img(width, height);
  const int left = 48, right = width - 16, top = 16, bottom = height - 40;
  if (right - left < 16 || bottom - top < 16) throw ConfigError("line plot is too small");
  const Rgb black{0, 0, 0}, grey{200, 200, 200};
  auto px = [&](double x) {
    const double t = (std::log(x) - std::log(a.x_min)) / (std::log(a.x_max) - std::log(a.x_min));
    return left + static_cast<int>(std::lround(t * (right - left)));
  };
  auto py = [&](double y) {
    const double t = (y - a.y_min) / (a.y_max - a.y_min);
    return bottom - static_cast<int>(std::lround(t * (bottom - top)));
  };
  for (int i = 1; i <= 10; ++i) {
    const int y = py(a.y_min + i * (a.y_max - a.y_min) / 10.0);
    detail::draw_line(img, left, y, right, y, grey);
    detail::draw_line(img, left - 5, y, left, y, black);
  }
  detail::draw_line(img, left, bottom, right, bottom, black);
  detail::draw_line(img, left, top, left, bottom, black);
  for (const auto& s : series)
    for (auto [x, y] : s.points) detail::draw_line(img, px(x), bottom, px(x), bottom + 6, black);
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.points.size(); ++i)
      detail::draw_line(img, px(s.points[i - 1].first), py(s.points[i - 1].second), px(s.points[i].first),
                        py(s.points[i].second), s.color, 2);
    for (auto [x, y] : s.points) img.fill_rect(px(x) - 3, py(y) - 3, px(x) + 4, py(y) + 4, s.color);
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const int y = top + 6 + 16 * static_cast<int>(i);
    img.fill_rect(right - 40, y, right - 8, y + 10, series[i].color);
  }
  return img;
}

}  // namespace mfsurro
