#pragma once

// MFWT parameter checkpoints (little-endian):
//
//   "MFWT" | u32 version
//   u32 meta_len | meta_len bytes of key=value lines
//   u32 array_count
//   array_count x ( u32 name_len | name | 4 x u32 shape (n c h w) | f32 data )
//   u32 crc32 of all preceding bytes

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mfsurro/binary.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/tensor.hpp"

namespace mfsurro {

inline constexpr char kCheckpointMagic[4] = {'M', 'F', 'W', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Tensor<float> value;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<NamedArray> arrays;  // order is part of the format

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays)
      if (a.name == name) return &a;
    return nullptr;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void put_arrays(ByteWriter& w, const std::vector<NamedArray>& arrays) {
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.raw(a.name.data(), a.name.size());
    const Shape s = a.value.shape;
    for (int d : {s.n, s.c, s.h, s.w}) w.u32(static_cast<std::uint32_t>(d));
    for (float v : a.value.data) w.f32(v);
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : ck.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
      throw DataError("checkpoint metadata '" + k + "' contains a reserved character");
    meta += k + "=" + v + "\n";
  }
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta.data(), meta.size());
  detail::put_arrays(w, ck.arrays);
  const std::uint32_t crc = crc32_of(w.bytes().data(), w.bytes().size());
  w.u32(crc);
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw BadMagicError(source + ": not an MFWT checkpoint");
  if (bytes.size() < 12) throw TruncatedError(source + ": checkpoint truncated");
  detail::ByteReader r(bytes.data() + 4, bytes.size() - 8, source);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError(source + ": unsupported checkpoint version " + std::to_string(version), version);
  detail::ByteReader tail(bytes.data() + bytes.size() - 4, 4, source);
  if (tail.u32() != crc32_of(bytes.data(), bytes.size() - 4))
    throw ChecksumError(source + ": checkpoint checksum mismatch", 0);

  Checkpoint ck;
  const std::uint32_t meta_len = r.u32();
  std::istringstream meta(r.raw(meta_len));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(source + ": malformed checkpoint metadata");
    ck.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.raw(r.u32());
    Shape s;
    s.n = static_cast<int>(r.u32());
    s.c = static_cast<int>(r.u32());
    s.h = static_cast<int>(r.u32());
    s.w = static_cast<int>(r.u32());
    if (s.size() > r.remaining() / 4) throw TruncatedError(source + ": array '" + a.name + "' truncated");
    a.value = Tensor<float>(s);
    for (float& v : a.value.data) v = r.f32();
    ck.arrays.push_back(std::move(a));
  }
  if (r.remaining() != 0) throw FormatError(source + ": trailing bytes after the last array");
  return ck;
}

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw DataError("failed writing '" + path.string() + "'");
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path.string());
}

/// CRC32 over the serialized arrays only; identifies a parameter set.
inline std::uint32_t arrays_hash(const std::vector<NamedArray>& arrays) {
  detail::ByteWriter w;
  detail::put_arrays(w, arrays);
  return crc32_of(w.bytes().data(), w.bytes().size());
}

}  // namespace mfsurro
