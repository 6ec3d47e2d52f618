#pragma once

// Random layout sampling, multi-fidelity dataset generation and the MFTF
// binary record format.
//
// MFTF file (all integers/floats little-endian):
//   header  : "MFTF" | u32 version | u32 lf_n | u32 hf_n
//   records : u32 body_size | body | u32 crc32(body)       (repeated)
//   table   : record_count x (u64 offset | u32 body_size | u32 crc32)
//   trailer : u64 table_offset | u32 record_count | "MFTE"
//
//   body    : u32 flags (bit0 lf label, bit1 hf label)
//             f64 L | f64 delta | f64 k | f64 T0
//             u32 component_count | component_count x 5 f64 (x0 y0 w h phi)
//             [lf_n*lf_n f32 row-major] [hf_n*hf_n f32 row-major]

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mfsurro/binary.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/fdm.hpp"
#include "mfsurro/field.hpp"

namespace mfsurro {

enum class LayoutKind { simple, complex };

inline std::string to_string(LayoutKind k) { return k == LayoutKind::simple ? "simple" : "complex"; }

inline LayoutKind parse_layout_kind(const std::string& s) {
  if (s == "simple") return LayoutKind::simple;
  if (s == "complex") return LayoutKind::complex;
  throw ConfigError("unknown layout spec '" + s + "' (expected simple or complex)");
}

struct ComponentShape {
  double width;
  double height;
  double intensity;

  friend bool operator==(const ComponentShape&, const ComponentShape&) = default;
};

struct LayoutSpec {
  LayoutKind kind = LayoutKind::simple;
  std::vector<ComponentShape> component_table;
  double length = 0.1;
  double conductivity = 1.0;
  double boundary_temp = 298.0;
  double hole_length = 0.01;
  int lattice_cells = kLowFidelityCells;  // placement lattice = length / lattice_cells

  double lattice_step() const { return length / lattice_cells; }
};

/// 20 identical 0.01 m squares at 10000 W/m^2.
inline LayoutSpec simple_spec() {
  LayoutSpec s;
  s.kind = LayoutKind::simple;
  s.component_table.assign(20, ComponentShape{0.01, 0.01, 10000.0});
  return s;
}

/// The 12-component table of the complex layout (width x height, intensity).
inline LayoutSpec complex_spec() {
  LayoutSpec s;
  s.kind = LayoutKind::complex;
  s.component_table = {
      {0.016, 0.012, 4000.0},  {0.012, 0.006, 16000.0}, {0.018, 0.009, 6000.0},
      {0.018, 0.012, 8000.0},  {0.018, 0.018, 10000.0}, {0.012, 0.012, 14000.0},
      {0.018, 0.006, 16000.0}, {0.009, 0.009, 20000.0}, {0.006, 0.024, 8000.0},
      {0.006, 0.012, 16000.0}, {0.012, 0.024, 10000.0}, {0.024, 0.024, 20000.0},
  };
  return s;
}

inline LayoutSpec layout_spec(LayoutKind kind) {
  return kind == LayoutKind::simple ? simple_spec() : complex_spec();
}

// --- deterministic RNG streams ----------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Independent 64-bit seed for (master seed, stream, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(splitmix64(seed) ^ (stream * 0xD1B54A32D192ED03ull)) ^ index);
}

struct PlacementLimits {
  int tries_per_component = 2000;
  int restarts = 200;
};

/// Places every table entry once at a uniformly drawn lattice position,
/// rejecting positions that overlap already placed components. Restarts the
/// whole layout when a component cannot be placed; throws PlacementError
/// once the restart budget is spent.
inline Layout sample_layout(const LayoutSpec& spec, std::mt19937_64& rng,
                            PlacementLimits limits = {}) {
  const double step = spec.lattice_step();
  const double eps = detail::length_eps(spec.length);
  for (int attempt = 0; attempt < limits.restarts; ++attempt) {
    Layout layout;
    layout.length = spec.length;
    layout.conductivity = spec.conductivity;
    layout.boundary_temp = spec.boundary_temp;
    layout.hole_length = spec.hole_length;
    bool ok = true;
    for (const auto& shape : spec.component_table) {
      const int max_x = static_cast<int>(std::floor((spec.length - shape.width) / step + 1e-9));
      const int max_y = static_cast<int>(std::floor((spec.length - shape.height) / step + 1e-9));
      if (max_x < 0 || max_y < 0) throw ConfigError("component larger than the domain");
      std::uniform_int_distribution<int> dx(0, max_x), dy(0, max_y);
      bool placed = false;
      for (int t = 0; t < limits.tries_per_component && !placed; ++t) {
        Component c{dx(rng) * step, dy(rng) * step, shape.width, shape.height, shape.intensity};
        bool clash = false;
        for (const auto& other : layout.components) {
          if (detail::overlaps(c, other, eps)) {
            clash = true;
            break;
          }
        }
        if (!clash) {
          layout.components.push_back(c);
          placed = true;
        }
      }
      if (!placed) {
        ok = false;
        break;
      }
    }
    if (ok) return layout;
  }
  throw PlacementError("could not place all components after " +
                       std::to_string(limits.restarts) + " restarts");
}

// --- samples ------------------------------------------------------------------

struct Sample {
  Layout layout;
  int lf_n = kLowFidelityCells;
  int hf_n = kHighFidelityCells;
  std::optional<std::vector<float>> y_lf;  // K, lf_n x lf_n
  std::optional<std::vector<float>> y_hf;  // K, hf_n x hf_n

  GridSpec lf_grid() const { return {lf_n, layout.length}; }
  GridSpec hf_grid() const { return {hf_n, layout.length}; }

  // Inputs are not stored; both fidelities rasterize the shared layout.
  ScalarField x_lf() const { return rasterize_layout(layout, lf_grid()); }
  ScalarField x_hf() const { return rasterize_layout(layout, hf_grid()); }
  ScalarField mask_hf() const { return component_mask(layout, hf_grid()); }

  ScalarField lf_field() const { return to_field(lf_grid(), y_lf, "low-fidelity"); }
  ScalarField hf_field() const { return to_field(hf_grid(), y_hf, "high-fidelity"); }

  friend bool operator==(const Sample&, const Sample&) = default;

 private:
  static ScalarField to_field(GridSpec g, const std::optional<std::vector<float>>& v,
                              const char* what) {
    if (!v) throw DataError(std::string("sample has no ") + what + " label");
    ScalarField f(g);
    std::copy(v->begin(), v->end(), f.values.begin());
    return f;
  }
};

inline std::vector<float> to_float32(const ScalarField& f) {
  return std::vector<float>(f.values.begin(), f.values.end());
}

/// Re-checks a stored label: the fixed-point residual must not exceed the
/// solver tolerance plus the error introduced by rounding to 32-bit floats.
inline bool verify_label(const Layout& layout, const GridSpec& grid, const std::vector<float>& y,
                         double tolerance) {
  ScalarField T(grid);
  std::copy(y.begin(), y.end(), T.values.begin());
  const ScalarField phi = rasterize_layout(layout, grid);
  const BoundarySpec bc = make_boundary(layout, grid);
  const double ulp = std::abs(T.max()) * std::numeric_limits<float>::epsilon();
  return residual_maxnorm(T, phi, bc) <= tolerance + 2.0 * ulp;
}

// --- binary encoding ------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr char kDatasetMagic[4] = {'M', 'F', 'T', 'F'};
inline constexpr char kDatasetTrailerMagic[4] = {'M', 'F', 'T', 'E'};

namespace detail {

inline std::vector<std::uint8_t> encode_body(const Sample& s) {
  ByteWriter w;
  std::uint32_t flags = 0;
  if (s.y_lf) flags |= 1u;
  if (s.y_hf) flags |= 2u;
  w.u32(flags);
  w.f64(s.layout.length);
  w.f64(s.layout.hole_length);
  w.f64(s.layout.conductivity);
  w.f64(s.layout.boundary_temp);
  w.u32(static_cast<std::uint32_t>(s.layout.components.size()));
  for (const auto& c : s.layout.components) {
    w.f64(c.x0);
    w.f64(c.y0);
    w.f64(c.width);
    w.f64(c.height);
    w.f64(c.intensity);
  }
  auto put = [&](const std::vector<float>& v, int n, const char* what) {
    if (v.size() != static_cast<std::size_t>(n) * n)
      throw DataError(std::string(what) + " label has the wrong size");
    for (float x : v) w.f32(x);
  };
  if (s.y_lf) put(*s.y_lf, s.lf_n, "low-fidelity");
  if (s.y_hf) put(*s.y_hf, s.hf_n, "high-fidelity");
  return std::move(w.bytes());
}

inline Sample decode_body(const std::uint8_t* p, std::size_t n, int lf_n, int hf_n,
                          std::size_t index) {
  ByteReader r(p, n, "record " + std::to_string(index));
  Sample s;
  s.lf_n = lf_n;
  s.hf_n = hf_n;
  const std::uint32_t flags = r.u32();
  s.layout.length = r.f64();
  s.layout.hole_length = r.f64();
  s.layout.conductivity = r.f64();
  s.layout.boundary_temp = r.f64();
  const std::uint32_t count = r.u32();
  if (count > r.remaining() / 40) throw TruncatedError("record " + std::to_string(index) +
                                                       ": component table exceeds body");
  s.layout.components.resize(count);
  for (auto& c : s.layout.components) {
    c.x0 = r.f64();
    c.y0 = r.f64();
    c.width = r.f64();
    c.height = r.f64();
    c.intensity = r.f64();
  }
  auto get = [&](int side) {
    std::vector<float> v(static_cast<std::size_t>(side) * side);
    for (float& x : v) x = r.f32();
    return v;
  };
  if (flags & 1u) s.y_lf = get(lf_n);
  if (flags & 2u) s.y_hf = get(hf_n);
  if (r.remaining() != 0)
    throw FormatError("record " + std::to_string(index) + ": trailing bytes in body");
  return s;
}

}  // namespace detail

struct RecordEntry {
  std::uint64_t offset = 0;
  std::uint32_t size = 0;
  std::uint32_t crc = 0;
};

/// Appends one record (size, body, crc) to `os` and returns its table entry.
inline RecordEntry write_sample(std::ostream& os, const Sample& s) {
  const auto body = detail::encode_body(s);
  RecordEntry e;
  e.offset = static_cast<std::uint64_t>(os.tellp());
  e.size = static_cast<std::uint32_t>(body.size());
  e.crc = crc32_of(body.data(), body.size());
  detail::ByteWriter w;
  w.u32(e.size);
  os.write(reinterpret_cast<const char*>(w.bytes().data()), 4);
  os.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  detail::ByteWriter c;
  c.u32(e.crc);
  os.write(reinterpret_cast<const char*>(c.bytes().data()), 4);
  if (!os) throw DataError("write failed while appending a record");
  return e;
}

/// Single writer for one MFTF file. close() (or destruction) emits the table.
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& path, int lf_n = kLowFidelityCells,
                int hf_n = kHighFidelityCells)
      : path_(path), os_(path, std::ios::binary | std::ios::trunc), lf_n_(lf_n), hf_n_(hf_n) {
    if (!os_) throw DataError("cannot open '" + path.string() + "' for writing: " +
                              std::strerror(errno));
    detail::ByteWriter w;
    w.raw(kDatasetMagic, 4);
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(lf_n));
    w.u32(static_cast<std::uint32_t>(hf_n));
    os_.write(reinterpret_cast<const char*>(w.bytes().data()),
              static_cast<std::streamsize>(w.bytes().size()));
  }
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;
  ~DatasetWriter() {
    try {
      close();
    } catch (...) {
    }
  }

  void append(const Sample& s) {
    if (closed_) throw DataError("append on a closed dataset writer");
    if (s.lf_n != lf_n_ || s.hf_n != hf_n_)
      throw DataError("sample grid sizes do not match the dataset file");
    table_.push_back(write_sample(os_, s));
  }

  void close() {
    if (closed_) return;
    closed_ = true;
    detail::ByteWriter w;
    const std::uint64_t table_offset = static_cast<std::uint64_t>(os_.tellp());
    for (const auto& e : table_) {
      w.u64(e.offset);
      w.u32(e.size);
      w.u32(e.crc);
    }
    w.u64(table_offset);
    w.u32(static_cast<std::uint32_t>(table_.size()));
    w.raw(kDatasetTrailerMagic, 4);
    os_.write(reinterpret_cast<const char*>(w.bytes().data()),
              static_cast<std::streamsize>(w.bytes().size()));
    os_.close();
    if (!os_) throw DataError("failed to finalize '" + path_.string() + "'");
  }

  std::size_t size() const { return table_.size(); }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
  int lf_n_, hf_n_;
  std::vector<RecordEntry> table_;
  bool closed_ = false;
};

/// Random-access reader. Concurrent reads need one reader per thread.
class DatasetReader {
 public:
  explicit DatasetReader(const std::filesystem::path& path) : path_(path) {
    is_.open(path, std::ios::binary);
    if (!is_) throw DataError("cannot open dataset '" + path.string() + "'");
    is_.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(is_.tellg());
    is_.seekg(0);
    if (file_size < 4) throw TruncatedError(path.string() + ": shorter than the magic");
    std::array<std::uint8_t, 16> head{};
    const std::size_t head_len = std::min<std::uint64_t>(16, file_size);
    read_at(0, head.data(), head_len);
    if (std::memcmp(head.data(), kDatasetMagic, 4) != 0)
      throw BadMagicError(path.string() + ": not an MFTF dataset file");
    if (head_len < 16) throw TruncatedError(path.string() + ": header truncated");
    detail::ByteReader hr(head.data() + 4, 12, "header");
    const std::uint32_t version = hr.u32();
    if (version != kDatasetVersion)
      throw VersionError(path.string() + ": unsupported dataset format version " +
                             std::to_string(version) + " (reader supports " +
                             std::to_string(kDatasetVersion) + ")",
                         version);
    lf_n_ = static_cast<int>(hr.u32());
    hf_n_ = static_cast<int>(hr.u32());

    if (file_size < 16 + 16) throw TruncatedError(path.string() + ": missing record table");
    std::array<std::uint8_t, 16> tail{};
    read_at(file_size - 16, tail.data(), 16);
    if (std::memcmp(tail.data() + 12, kDatasetTrailerMagic, 4) != 0)
      throw TruncatedError(path.string() + ": trailer missing (file truncated?)");
    detail::ByteReader tr(tail.data(), 12, "trailer");
    const std::uint64_t table_offset = tr.u64();
    const std::uint32_t count = tr.u32();
    if (table_offset + static_cast<std::uint64_t>(count) * 16 + 16 != file_size)
      throw TruncatedError(path.string() + ": record table size does not match file size");
    std::vector<std::uint8_t> table(static_cast<std::size_t>(count) * 16);
    if (!table.empty()) read_at(table_offset, table.data(), table.size());
    detail::ByteReader rr(table.data(), table.size(), "record table");
    entries_.resize(count);
    for (auto& e : entries_) {
      e.offset = rr.u64();
      e.size = rr.u32();
      e.crc = rr.u32();
      if (e.offset + 8 + e.size > table_offset)
        throw TruncatedError(path.string() + ": record extends past the table");
    }
  }

  std::size_t size() const { return entries_.size(); }
  int lf_n() const { return lf_n_; }
  int hf_n() const { return hf_n_; }

  Sample read(std::size_t index) {
    if (index >= entries_.size()) throw DataError("record index out of range");
    const auto& e = entries_[index];
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(e.size) + 8);
    read_at(e.offset, buf.data(), buf.size());
    detail::ByteReader hr(buf.data(), 4, "record size");
    if (hr.u32() != e.size)
      throw ChecksumError(path_.string() + ": record " + std::to_string(index) +
                              " size field disagrees with the table",
                          index);
    const std::uint8_t* body = buf.data() + 4;
    detail::ByteReader cr(body + e.size, 4, "record crc");
    const std::uint32_t stored = cr.u32();
    const std::uint32_t actual = crc32_of(body, e.size);
    if (stored != e.crc || actual != e.crc)
      throw ChecksumError(path_.string() + ": checksum mismatch in record " +
                              std::to_string(index),
                          index);
    return detail::decode_body(body, e.size, lf_n_, hf_n_, index);
  }

  std::vector<Sample> read_all() {
    std::vector<Sample> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(read(i));
    return out;
  }

 private:
  void read_at(std::uint64_t offset, std::uint8_t* dst, std::size_t n) {
    is_.clear();
    is_.seekg(static_cast<std::streamoff>(offset));
    is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw TruncatedError(path_.string() + ": unexpected end of file");
  }

  std::filesystem::path path_;
  std::ifstream is_;
  int lf_n_ = 0, hf_n_ = 0;
  std::vector<RecordEntry> entries_;
};

inline std::vector<Sample> read_dataset(const std::filesystem::path& path) {
  DatasetReader r(path);
  return r.read_all();
}

// --- manifests and generation -----------------------------------------------------

enum class Split { lf, lf_unlabeled, hf, test };
inline constexpr std::array<Split, 4> kAllSplits = {Split::lf, Split::lf_unlabeled, Split::hf,
                                                    Split::test};

inline std::string to_string(Split s) {
  switch (s) {
    case Split::lf: return "lf";
    case Split::lf_unlabeled: return "lf_unlabeled";
    case Split::hf: return "hf";
    case Split::test: return "test";
  }
  return "?";
}

inline std::string split_file(Split s) { return to_string(s) + ".mftf"; }

// which labels a split carries
inline bool split_has_lf(Split s) { return s == Split::lf || s == Split::hf || s == Split::test; }
inline bool split_has_hf(Split s) { return s == Split::hf || s == Split::test; }

struct GenerationSolvers {
  SolverConfig lf{1e-9, 500000, 1.9, 16};
  SolverConfig hf{1e-9, 500000, 1.995, 16};
};

struct DatasetManifest {
  LayoutKind spec = LayoutKind::simple;
  std::map<Split, std::size_t> counts{
      {Split::lf, 0}, {Split::lf_unlabeled, 0}, {Split::hf, 0}, {Split::test, 0}};
  std::uint64_t seed = 0;
  std::uint32_t format_version = kDatasetVersion;
  int lf_n = kLowFidelityCells;
  int hf_n = kHighFidelityCells;
  double hole_length = 0.01;
  GenerationSolvers solvers;
  std::string created;  // informational timestamp, excluded from determinism

  std::size_t count(Split s) const {
    auto it = counts.find(s);
    return it == counts.end() ? 0 : it->second;
  }
};

inline std::string manifest_to_string(const DatasetManifest& m) {
  std::ostringstream os;
  os << "format_version=" << m.format_version << '\n'
     << "spec=" << to_string(m.spec) << '\n'
     << "seed=" << m.seed << '\n';
  for (Split s : kAllSplits) os << "counts." << to_string(s) << '=' << m.count(s) << '\n';
  os << "lf_n=" << m.lf_n << '\n'
     << "hf_n=" << m.hf_n << '\n'
     << "delta=" << detail::format_double(m.hole_length) << '\n'
     << "tolerance=" << detail::format_double(m.solvers.lf.tolerance) << '\n'
     << "tolerance.hf=" << detail::format_double(m.solvers.hf.tolerance) << '\n'
     << "omega.lf=" << detail::format_double(m.solvers.lf.omega) << '\n'
     << "omega.hf=" << detail::format_double(m.solvers.hf.omega) << '\n';
  for (Split s : kAllSplits) os << "files." << to_string(s) << '=' << split_file(s) << '\n';
  if (!m.created.empty()) os << "created=" << m.created << '\n';
  return os.str();
}

/// Parses flat `key=value` lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_key_values(std::istream& is,
                                                           const std::string& source) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline DatasetManifest manifest_from_string(const std::string& text) {
  std::istringstream is(text);
  const auto kv = parse_key_values(is, "manifest");
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("manifest lacks key '" + k + "'");
    return it->second;
  };
  auto num = [&](const std::string& k) {
    const std::string& v = need(k);
    try {
      return std::stod(v);
    } catch (...) {
      throw DataError("manifest key '" + k + "' is not a number: '" + v + "'");
    }
  };
  auto uint = [&](const std::string& k) {
    const std::string& v = need(k);
    try {
      return static_cast<std::uint64_t>(std::stoull(v));
    } catch (...) {
      throw DataError("manifest key '" + k + "' is not an integer: '" + v + "'");
    }
  };
  DatasetManifest m;
  m.format_version = static_cast<std::uint32_t>(uint("format_version"));
  if (m.format_version != kDatasetVersion)
    throw VersionError("unsupported manifest format_version " + std::to_string(m.format_version),
                       m.format_version);
  m.spec = parse_layout_kind(need("spec"));
  m.seed = uint("seed");
  for (Split s : kAllSplits) m.counts[s] = uint("counts." + to_string(s));
  m.lf_n = static_cast<int>(uint("lf_n"));
  m.hf_n = static_cast<int>(uint("hf_n"));
  m.hole_length = num("delta");
  m.solvers.lf.tolerance = num("tolerance");
  m.solvers.hf.tolerance = num("tolerance.hf");
  m.solvers.lf.omega = num("omega.lf");
  m.solvers.hf.omega = num("omega.hf");
  if (auto it = kv.find("created"); it != kv.end()) m.created = it->second;
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw DataError("cannot open manifest in '" + dir.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return manifest_from_string(ss.str());
}

struct LabelStats {
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  double mean = 0.0;
  std::size_t fields = 0;

  void add(const std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) {
      min = std::min(min, static_cast<double>(x));
      max = std::max(max, static_cast<double>(x));
      s += x;
    }
    mean += (s / v.size() - mean) / static_cast<double>(++fields);
  }
};

struct SplitSummary {
  std::size_t count = 0;
  LabelStats lf;
  LabelStats hf;
};

struct GenerationSummary {
  std::map<Split, SplitSummary> splits;
};

inline std::uint64_t split_stream(Split s) { return static_cast<std::uint64_t>(s) + 1; }

/// Layout and labels of one sample; a pure function of (manifest, split, index).
inline Sample generate_sample(const DatasetManifest& m, Split split, std::size_t index) {
  LayoutSpec spec = layout_spec(m.spec);
  spec.hole_length = m.hole_length;
  std::mt19937_64 rng(derive_seed(m.seed, split_stream(split), index));
  Sample s;
  s.lf_n = m.lf_n;
  s.hf_n = m.hf_n;
  s.layout = sample_layout(spec, rng);
  auto label = [&](int n, const SolverConfig& cfg) {
    const GridSpec g(n, s.layout.length);
    try {
      return to_float32(solve_steady(rasterize_layout(s.layout, g), make_boundary(s.layout, g), cfg));
    } catch (const SolverError& e) {
      throw SolverError("split " + to_string(split) + " sample " + std::to_string(index) + ": " +
                            e.what(),
                        e.residual(), e.iterations());
    }
  };
  if (split_has_lf(split)) s.y_lf = label(m.lf_n, m.solvers.lf);
  if (split_has_hf(split)) s.y_hf = label(m.hf_n, m.solvers.hf);
  return s;
}

inline unsigned worker_threads() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MFSURRO_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  return n;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Writes manifest.txt and one MFTF file per split into `out_dir`. Samples
/// are computed in parallel and appended in index order by a single writer.
inline GenerationSummary generate_dataset(DatasetManifest manifest,
                                          const std::filesystem::path& out_dir,
                                          unsigned threads = worker_threads()) {
  manifest.solvers.lf.validate();
  manifest.solvers.hf.validate();
  std::filesystem::create_directories(out_dir);
  GenerationSummary summary;
  threads = std::max(1u, threads);
  for (Split split : kAllSplits) {
    const std::size_t count = manifest.count(split);
    SplitSummary& ss = summary.splits[split];
    if (count == 0) {
      std::filesystem::remove(out_dir / split_file(split));
      continue;
    }
    DatasetWriter writer(out_dir / split_file(split), manifest.lf_n, manifest.hf_n);
    const std::size_t chunk = std::max<std::size_t>(threads * 4, 1);
    for (std::size_t begin = 0; begin < count; begin += chunk) {
      const std::size_t end = std::min(count, begin + chunk);
      std::vector<std::optional<Sample>> done(end - begin);
      std::vector<std::exception_ptr> errors(threads);
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
          try {
            for (std::size_t i = begin + t; i < end; i += threads)
              done[i - begin] = generate_sample(manifest, split, i);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors)
        if (e) std::rethrow_exception(e);
      for (auto& s : done) {
        writer.append(*s);
        if (s->y_lf) ss.lf.add(*s->y_lf);
        if (s->y_hf) ss.hf.add(*s->y_hf);
        ++ss.count;
      }
    }
    writer.close();
  }
  if (manifest.created.empty()) manifest.created = utc_timestamp();
  std::ofstream os(out_dir / "manifest.txt", std::ios::trunc);
  if (!os) throw DataError("cannot write manifest in '" + out_dir.string() + "'");
  os << manifest_to_string(manifest);
  if (!os) throw DataError("failed writing manifest in '" + out_dir.string() + "'");
  return summary;
}

/// Empty splits have no file; they load as an empty vector.
inline std::vector<Sample> load_split(const std::filesystem::path& dir, Split split) {
  const auto path = dir / split_file(split);
  if (!std::filesystem::exists(path) && read_manifest(dir).count(split) == 0) return {};
  return read_dataset(path);
}

}  // namespace mfsurro
