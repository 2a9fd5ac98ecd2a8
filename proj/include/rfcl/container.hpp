#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rfcl/error.hpp"

namespace rfcl {

/// Binary named-tensor container shared by checkpoints and dataset caches.
///
/// Layout (all integers and floats little-endian):
///   "DBCKPT01"
///   u32 entry count
///   per entry: u32 name length, name bytes (UTF-8), u32 rank, u64 dims[rank],
///              f64 values[product(dims)]
inline constexpr std::string_view kContainerMagic = "DBCKPT01";

enum class ContainerErrorKind { corrupt_header, shape_table_mismatch, truncated_payload, io };

inline const char* to_string(ContainerErrorKind kind) {
  switch (kind) {
    case ContainerErrorKind::corrupt_header: return "corrupt header";
    case ContainerErrorKind::shape_table_mismatch: return "shape-table mismatch";
    case ContainerErrorKind::truncated_payload: return "truncated payload";
    case ContainerErrorKind::io: return "io error";
  }
  return "?";
}

class ContainerError : public Error {
 public:
  ContainerError(ContainerErrorKind kind, const std::string& detail)
      : Error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}
  ContainerErrorKind kind() const { return kind_; }

 private:
  ContainerErrorKind kind_;
};

/// One named record. Dims may contain zeros (empty metadata arrays).
struct ContainerEntry {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

namespace detail {

template <class T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <class T>
  T get(const char* what) {
    if (data_.size() - pos_ < sizeof(T)) {
      throw ContainerError(ContainerErrorKind::truncated_payload,
                           std::string("file ends while reading ") + what + " at byte " + std::to_string(pos_));
    }
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n) {
      throw ContainerError(ContainerErrorKind::truncated_payload,
                           std::string("file ends while reading ") + what + " at byte " + std::to_string(pos_));
    }
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const std::vector<ContainerEntry>& entries) {
  std::string out(kContainerMagic);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    std::uint64_t n = 1;
    for (auto d : e.dims) n *= d;
    if (n != e.values.size()) {
      throw ContainerError(ContainerErrorKind::shape_table_mismatch,
                           "entry '" + e.name + "' dims do not match its value count");
    }
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) detail::put_le<std::uint64_t>(out, d);
    for (double v : e.values) detail::put_le<double>(out, v);
  }
  return out;
}

inline std::vector<ContainerEntry> decode_container(std::string_view bytes) {
  if (bytes.size() < kContainerMagic.size() || bytes.substr(0, kContainerMagic.size()) != kContainerMagic) {
    throw ContainerError(ContainerErrorKind::corrupt_header, "missing DBCKPT01 magic");
  }
  detail::ByteReader in(bytes.substr(kContainerMagic.size()));
  const auto count = in.get<std::uint32_t>("entry count");
  std::vector<ContainerEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    ContainerEntry e;
    const auto name_len = in.get<std::uint32_t>("name length");
    e.name = std::string(in.take(name_len, "name"));
    const auto rank = in.get<std::uint32_t>("rank");
    if (rank > 8) {
      throw ContainerError(ContainerErrorKind::shape_table_mismatch,
                           "entry '" + e.name + "' declares implausible rank " + std::to_string(rank));
    }
    std::uint64_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto d = in.get<std::uint64_t>("dims");
      e.dims.push_back(d);
      if (d != 0 && n > (std::uint64_t{1} << 40) / d) {
        throw ContainerError(ContainerErrorKind::shape_table_mismatch, "entry '" + e.name + "' is too large");
      }
      n *= d;
    }
    if (in.remaining() / sizeof(double) < n) {
      throw ContainerError(ContainerErrorKind::truncated_payload,
                           "entry '" + e.name + "' needs " + std::to_string(n * sizeof(double)) + " bytes, " +
                               std::to_string(in.remaining()) + " remain");
    }
    e.values.resize(n);
    for (auto& v : e.values) v = in.get<double>("values");
    entries.push_back(std::move(e));
  }
  if (in.remaining() != 0) {
    throw ContainerError(ContainerErrorKind::shape_table_mismatch,
                         std::to_string(in.remaining()) + " bytes beyond the declared entries");
  }
  return entries;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContainerError(ContainerErrorKind::io, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

/// Writes to a sibling temporary file, then renames over `path`.
inline void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ContainerError(ContainerErrorKind::io, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ContainerError(ContainerErrorKind::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_container(const std::filesystem::path& path, const std::vector<ContainerEntry>& entries) {
  atomic_write(path, encode_container(entries));
}

inline std::vector<ContainerEntry> read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path));
}

}  // namespace rfcl
