#pragma once

// Binary checkpoint files.
//
//   "MGUN"                    4-byte magic
//   u32 version
//   u64 record count
//   per record:
//     u32 name length, name bytes (UTF-8, no terminator)
//     u32 rank, u64 extent[rank]
//     f64 payload[product(extents)]
//
// All integers and floats are little-endian; payload bits are copied
// verbatim, so a save/load cycle is bitwise lossless.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mgunet/errors.hpp"
#include "mgunet/nn.hpp"
#include "mgunet/tensor.hpp"

namespace mgu {

inline constexpr char kCheckpointMagic[4] = {'M', 'G', 'U', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
  friend bool operator==(const TensorRecord&, const TensorRecord&) = default;
};

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const std::string& path) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw DataError(path + ": truncated checkpoint");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path,
                             const std::vector<TensorRecord>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);
  detail::write_le<std::uint64_t>(os, records.size());
  for (const auto& r : records) {
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.shape.size()));
    for (auto e : r.shape) detail::write_le<std::uint64_t>(os, e);
    for (double v : r.values) detail::write_le<double>(os, v);
  }
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

inline std::vector<TensorRecord> read_checkpoint(const std::filesystem::path& path) {
  const auto where = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + where);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw DataError(where + ": not a checkpoint (bad magic)");
  }
  const auto version = detail::read_le<std::uint32_t>(is, where);
  if (version != kCheckpointVersion) {
    throw DataError(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = detail::read_le<std::uint64_t>(is, where);
  std::vector<TensorRecord> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto len = detail::read_le<std::uint32_t>(is, where);
    r.name.resize(len);
    if (!is.read(r.name.data(), len)) throw DataError(where + ": truncated checkpoint");
    const auto rank = detail::read_le<std::uint32_t>(is, where);
    for (std::uint32_t k = 0; k < rank; ++k) {
      r.shape.push_back(static_cast<std::size_t>(detail::read_le<std::uint64_t>(is, where)));
    }
    r.values.resize(numel(r.shape));
    for (auto& v : r.values) v = detail::read_le<double>(is, where);
    records.push_back(std::move(r));
  }
  return records;
}

inline std::vector<TensorRecord> snapshot(const ParameterList& params) {
  std::vector<TensorRecord> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    const auto v = p.tensor.values();
    out.push_back({p.name, p.tensor.shape(), {v.begin(), v.end()}});
  }
  return out;
}

/// Copies record values into the matching parameters. Every parameter must
/// have a record of identical shape; records with other names are ignored.
inline void restore(const ParameterList& params, const std::vector<TensorRecord>& records) {
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : records) by_name[r.name] = &r;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ConfigError("checkpoint lacks parameter '" + p.name + "'");
    if (it->second->shape != p.tensor.shape()) {
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " +
                        to_string(it->second->shape) + ", model expects " +
                        to_string(p.tensor.shape()));
    }
    auto t = p.tensor;
    std::copy(it->second->values.begin(), it->second->values.end(), t.mutable_values().begin());
  }
}

inline const TensorRecord* find_record(const std::vector<TensorRecord>& records,
                                       const std::string& name) {
  for (const auto& r : records) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

}  // namespace mgu
