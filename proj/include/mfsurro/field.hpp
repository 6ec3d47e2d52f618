#pragma once

// Domain geometry, heat-source layouts and their rasterization onto
// cell-centered grids.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mfsurro/error.hpp"

namespace mfsurro {

/// Square cell-centered grid. Cell (row, col) has its center at
/// ((col + 0.5) * spacing, (row + 0.5) * spacing); column 0 touches the left
/// wall where the dissipation hole sits.
struct GridSpec {
  int n = 50;
  double length = 0.1;

  GridSpec() = default;
  GridSpec(int cells, double side) : n(cells), length(side) {
    if (cells < 2) throw ConfigError("grid needs at least 2 cells per side");
    if (!(side > 0.0)) throw ConfigError("grid length must be positive");
  }

  double spacing() const { return length / n; }
  std::size_t cells() const { return static_cast<std::size_t>(n) * n; }
  double center(int index) const { return (index + 0.5) * spacing(); }

  friend bool operator==(const GridSpec& a, const GridSpec& b) {
    return a.n == b.n && a.length == b.length;
  }
};

inline constexpr int kLowFidelityCells = 50;
inline constexpr int kHighFidelityCells = 200;

struct Component {
  double x0 = 0.0;
  double y0 = 0.0;
  double width = 0.0;
  double height = 0.0;
  double intensity = 0.0;  // W/m^2

  double x1() const { return x0 + width; }
  double y1() const { return y0 + height; }
  double power() const { return intensity * width * height; }

  friend bool operator==(const Component&, const Component&) = default;
};

struct Layout {
  std::vector<Component> components;
  double length = 0.1;          // L (m)
  double hole_length = 0.01;    // delta (m)
  double boundary_temp = 298.0; // T0 (K)
  double conductivity = 1.0;    // k (W/(m K))

  double hole_center() const { return 0.5 * length; }
  double total_power() const {
    double p = 0.0;
    for (const auto& c : components) p += c.power();
    return p;
  }

  friend bool operator==(const Layout&, const Layout&) = default;
};

struct ScalarField {
  GridSpec grid;
  std::vector<double> values;

  ScalarField() = default;
  explicit ScalarField(GridSpec g, double fill = 0.0)
      : grid(g), values(g.cells(), fill) {}
  ScalarField(GridSpec g, std::vector<double> v) : grid(g), values(std::move(v)) {
    if (values.size() != grid.cells())
      throw GridMismatchError("field values do not match grid dimensions");
  }

  int n() const { return grid.n; }
  double& at(int row, int col) { return values[static_cast<std::size_t>(row) * grid.n + col]; }
  double at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * grid.n + col];
  }

  double min() const { return *std::min_element(values.begin(), values.end()); }
  double max() const { return *std::max_element(values.begin(), values.end()); }
  double sum() const {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  double mean() const { return values.empty() ? 0.0 : sum() / values.size(); }
};

inline void require_same_grid(const ScalarField& a, const ScalarField& b, const char* what) {
  if (!(a.grid == b.grid) || a.values.size() != b.values.size())
    throw GridMismatchError(std::string(what) + ": fields live on different grids");
}

namespace detail {

inline double length_eps(double length) { return 1e-12 * length; }

inline bool overlaps(const Component& a, const Component& b, double eps) {
  const double dx = std::min(a.x1(), b.x1()) - std::max(a.x0, b.x0);
  const double dy = std::min(a.y1(), b.y1()) - std::max(a.y0, b.y0);
  return dx > eps && dy > eps;
}

}  // namespace detail

/// Throws LayoutError when components overlap, leave the domain or carry a
/// non-positive intensity, or when the hole does not fit the left wall.
inline void validate_layout(const Layout& layout) {
  const double L = layout.length;
  const double eps = detail::length_eps(L);
  if (!(L > 0.0)) throw LayoutError("domain length must be positive");
  if (!(layout.conductivity > 0.0)) throw LayoutError("conductivity must be positive");
  if (!(layout.hole_length > 0.0)) throw LayoutError("hole length must be positive");
  const double h0 = layout.hole_center() - 0.5 * layout.hole_length;
  const double h1 = layout.hole_center() + 0.5 * layout.hole_length;
  if (h0 < -eps || h1 > L + eps) throw LayoutError("hole does not fit on the left wall");

  const auto& cs = layout.components;
  for (std::size_t i = 0; i < cs.size(); ++i) {
    const auto& c = cs[i];
    if (!(c.intensity > 0.0))
      throw LayoutError("component " + std::to_string(i) + " has non-positive intensity");
    if (!(c.width > 0.0) || !(c.height > 0.0))
      throw LayoutError("component " + std::to_string(i) + " has empty extent");
    if (c.x0 < -eps || c.y0 < -eps || c.x1() > L + eps || c.y1() > L + eps)
      throw LayoutError("component " + std::to_string(i) + " leaves the domain");
    for (std::size_t j = 0; j < i; ++j) {
      if (detail::overlaps(c, cs[j], eps))
        throw LayoutError("components " + std::to_string(j) + " and " + std::to_string(i) +
                          " overlap");
    }
  }
}

namespace detail {

// Closed-interval membership with a tolerance far below the cell size so that
// centers sitting exactly on an edge (lattice-aligned sizes) are included
// regardless of decimal rounding.
inline bool covers(double lo, double hi, double x, double eps) {
  return x >= lo - eps && x <= hi + eps;
}

inline void require_grid_matches(const Layout& layout, const GridSpec& grid) {
  if (std::abs(grid.length - layout.length) > length_eps(layout.length))
    throw GridMismatchError("grid length differs from layout domain length");
}

}  // namespace detail

/// Samples phi(x, y) at cell centers: the intensity of the first component
/// (in layout order) whose closed rectangle contains the center, else 0.
inline ScalarField rasterize_layout(const Layout& layout, const GridSpec& grid) {
  detail::require_grid_matches(layout, grid);
  validate_layout(layout);
  ScalarField out(grid, 0.0);
  const double eps = 1e-6 * grid.spacing();
  for (const auto& c : layout.components) {
    for (int row = 0; row < grid.n; ++row) {
      const double y = grid.center(row);
      if (!detail::covers(c.y0, c.y1(), y, eps)) continue;
      for (int col = 0; col < grid.n; ++col) {
        if (out.at(row, col) != 0.0) continue;
        if (detail::covers(c.x0, c.x1(), grid.center(col), eps)) out.at(row, col) = c.intensity;
      }
    }
  }
  return out;
}

inline ScalarField component_mask(const Layout& layout, const GridSpec& grid) {
  ScalarField phi = rasterize_layout(layout, grid);
  for (double& v : phi.values) v = v > 0.0 ? 1.0 : 0.0;
  return phi;
}

/// Bilinear interpolation between cell centers; targets outside the hull of
/// source centers take the nearest edge value.
inline ScalarField upsample_bilinear(const ScalarField& field, const GridSpec& target) {
  const GridSpec& src = field.grid;
  if (std::abs(target.length - src.length) > detail::length_eps(src.length))
    throw GridMismatchError("upsample target has a different domain length");
  if (target.n < src.n) throw UnsupportedError("upsample_bilinear cannot reduce resolution");

  ScalarField out(target);
  const double ratio = static_cast<double>(src.n) / target.n;
  const int last = src.n - 1;
  auto locate = [&](int index, int& i0, double& t) {
    const double u = std::clamp((index + 0.5) * ratio - 0.5, 0.0, static_cast<double>(last));
    i0 = std::min(static_cast<int>(std::floor(u)), last - 1);
    t = u - i0;
  };
  for (int row = 0; row < target.n; ++row) {
    int r0;
    double tr;
    locate(row, r0, tr);
    const int r1 = std::min(r0 + 1, last);
    for (int col = 0; col < target.n; ++col) {
      int c0;
      double tc;
      locate(col, c0, tc);
      const int c1 = std::min(c0 + 1, last);
      const double top = (1.0 - tc) * field.at(r0, c0) + tc * field.at(r0, c1);
      const double bottom = (1.0 - tc) * field.at(r1, c0) + tc * field.at(r1, c1);
      out.at(row, col) = (1.0 - tr) * top + tr * bottom;
    }
  }
  return out;
}

// --- layout text format -----------------------------------------------------
//
//   L=<m> delta=<m> k=<W/mK> T0=<K>
//   x0 y0 width height intensity      (one line per component)

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const char* what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw LayoutError(std::string("malformed number for ") + what + ": '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

inline void write_layout_text(std::ostream& os, const Layout& layout) {
  using detail::format_double;
  os << "L=" << format_double(layout.length) << " delta=" << format_double(layout.hole_length)
     << " k=" << format_double(layout.conductivity) << " T0=" << format_double(layout.boundary_temp)
     << '\n';
  for (const auto& c : layout.components) {
    os << format_double(c.x0) << ' ' << format_double(c.y0) << ' ' << format_double(c.width) << ' '
       << format_double(c.height) << ' ' << format_double(c.intensity) << '\n';
  }
}

inline Layout read_layout_text(std::istream& is) {
  Layout layout;
  std::string line;
  if (!std::getline(is, line)) throw LayoutError("layout text is empty");
  {
    std::istringstream hs(line);
    std::string tok;
    bool seen[4] = {false, false, false, false};
    while (hs >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw LayoutError("malformed header token '" + tok + "'");
      const std::string key = tok.substr(0, eq);
      const std::string_view val = std::string_view(tok).substr(eq + 1);
      if (key == "L") {
        layout.length = detail::parse_double(val, "L");
        seen[0] = true;
      } else if (key == "delta") {
        layout.hole_length = detail::parse_double(val, "delta");
        seen[1] = true;
      } else if (key == "k") {
        layout.conductivity = detail::parse_double(val, "k");
        seen[2] = true;
      } else if (key == "T0") {
        layout.boundary_temp = detail::parse_double(val, "T0");
        seen[3] = true;
      } else {
        throw LayoutError("unknown header key '" + key + "'");
      }
    }
    if (!(seen[0] && seen[1] && seen[2] && seen[3]))
      throw LayoutError("layout header must define L, delta, k and T0");
  }
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string f[5];
    for (auto& s : f)
      if (!(ls >> s)) throw LayoutError("component line needs 5 numbers: '" + line + "'");
    std::string extra;
    if (ls >> extra) throw LayoutError("trailing data on component line: '" + line + "'");
    layout.components.push_back({detail::parse_double(f[0], "x0"), detail::parse_double(f[1], "y0"),
                                 detail::parse_double(f[2], "width"),
                                 detail::parse_double(f[3], "height"),
                                 detail::parse_double(f[4], "intensity")});
  }
  validate_layout(layout);
  return layout;
}

inline std::string layout_to_string(const Layout& layout) {
  std::ostringstream os;
  write_layout_text(os, layout);
  return os.str();
}

inline Layout layout_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_layout_text(is);
}

}  // namespace mfsurro
