#pragma once

// GTF1: named dense tensors in one little-endian file. Byte layout is in
// docs/format.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <type_traits>
#include <variant>
#include <vector>

#include "mlground/error.hpp"
#include "mlground/tensor.hpp"

namespace mlground {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }
inline const char* dtype_name(DType t) { return t == DType::F32 ? "f32" : "f64"; }

class ContainerError : public Error {
 public:
  enum class Kind {
    Io,
    BadMagic,
    UnsupportedVersion,
    TruncatedTable,
    PayloadOutOfBounds,
    DuplicateName,
    BadEntry,
    OverlappingPayload,
    MissingEntry,
  };

  ContainerError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kGtfMagic[4] = {'G', 'T', 'F', '1'};
inline constexpr std::uint32_t kGtfVersion = 1;
inline constexpr std::size_t kGtfMaxRank = 8;

using StoredTensor = std::variant<Tensor<float>, Tensor<double>>;

inline DType stored_dtype(const StoredTensor& t) {
  return std::holds_alternative<Tensor<float>>(t) ? DType::F32 : DType::F64;
}

inline const Shape& stored_shape(const StoredTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

template <typename Scalar>
Tensor<Scalar> stored_as(const StoredTensor& t) {
  return std::visit([](const auto& x) { return x.template cast<Scalar>(); }, t);
}

namespace detail {

template <typename T>
void put_le(std::vector<char>& buf, T v) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  auto u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
  }
}

template <typename T>
T get_le(const char* p) {
  using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
            std::conditional_t<sizeof(T) == 2, std::uint16_t,
            std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<U>(static_cast<std::uint8_t>(p[i])) << (8 * i);
  }
  return std::bit_cast<T>(u);
}

}  // namespace detail

// Entry-table record as parsed from disk.
struct GtfEntry {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
};

// Parses and validates the entry table up front; payloads are read on
// demand.
class ContainerReader {
 public:
  explicit ContainerReader(const std::filesystem::path& path) : path_(path) {
    using K = ContainerError::Kind;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContainerError(K::Io, detail::concat("cannot open '", path.string(), "'"));
    in.seekg(0, std::ios::end);
    const auto file_size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);

    auto need = [&](std::size_t n, const char* what) {
      std::vector<char> buf(n);
      if (n && !in.read(buf.data(), static_cast<std::streamsize>(n))) {
        throw ContainerError(K::TruncatedTable, detail::concat("'", path.string(),
                                                               "': truncated while reading ", what));
      }
      return buf;
    };

    auto head = need(4, "magic");
    if (std::memcmp(head.data(), kGtfMagic, 4) != 0) {
      throw ContainerError(K::BadMagic, detail::concat("'", path.string(), "': bad magic"));
    }
    auto fixed = need(8, "header");
    const auto version = detail::get_le<std::uint32_t>(fixed.data());
    if (version != kGtfVersion) {
      throw ContainerError(K::UnsupportedVersion,
                           detail::concat("'", path.string(), "': unsupported version ", version));
    }
    const auto count = detail::get_le<std::uint32_t>(fixed.data() + 4);
    std::vector<std::pair<std::uint64_t, std::uint64_t>> spans;
    for (std::uint32_t e = 0; e < count; ++e) {
      GtfEntry entry;
      const auto name_len = detail::get_le<std::uint32_t>(need(4, "name length").data());
      if (name_len == 0 || name_len > file_size) {
        throw ContainerError(K::BadEntry, detail::concat("'", path.string(), "': entry ", e,
                                                         " has invalid name length ", name_len));
      }
      auto name = need(name_len, "name");
      entry.name.assign(name.begin(), name.end());
      auto meta = need(4, "entry header");
      const auto dtype = static_cast<std::uint8_t>(meta[0]);
      const auto rank = static_cast<std::uint8_t>(meta[1]);
      if (dtype != 1 && dtype != 2) {
        throw ContainerError(K::BadEntry, detail::concat("'", path.string(), "': entry '",
                                                         entry.name, "' has unknown dtype ",
                                                         int(dtype)));
      }
      if (rank == 0 || rank > kGtfMaxRank) {
        throw ContainerError(K::BadEntry, detail::concat("'", path.string(), "': entry '",
                                                         entry.name, "' has rank ", int(rank)));
      }
      entry.dtype = static_cast<DType>(dtype);
      auto ext = need(8 * rank + 16, "extents");
      std::uint64_t numel = 1;
      for (std::size_t i = 0; i < rank; ++i) {
        const auto x = detail::get_le<std::uint64_t>(ext.data() + 8 * i);
        if (x == 0 || numel > file_size / x) {
          throw ContainerError(K::BadEntry, detail::concat("'", path.string(), "': entry '",
                                                           entry.name, "' has extent ", x));
        }
        numel *= x;
        entry.shape.push_back(static_cast<std::size_t>(x));
      }
      entry.offset = detail::get_le<std::uint64_t>(ext.data() + 8 * rank);
      entry.nbytes = detail::get_le<std::uint64_t>(ext.data() + 8 * rank + 8);
      if (entry.nbytes != numel * dtype_size(entry.dtype)) {
        throw ContainerError(K::BadEntry, detail::concat("'", path.string(), "': entry '",
                                                         entry.name, "' declares ", entry.nbytes,
                                                         " bytes for shape ",
                                                         detail::shape_str(entry.shape)));
      }
      if (entry.offset > file_size || entry.nbytes > file_size - entry.offset) {
        throw ContainerError(K::PayloadOutOfBounds,
                             detail::concat("'", path.string(), "': entry '", entry.name,
                                            "' payload [", entry.offset, ", ",
                                            entry.offset + entry.nbytes,
                                            ") exceeds file size ", file_size));
      }
      if (index_.count(entry.name)) {
        throw ContainerError(K::DuplicateName, detail::concat("'", path.string(),
                                                              "': duplicate entry name '",
                                                              entry.name, "'"));
      }
      spans.emplace_back(entry.offset, entry.offset + entry.nbytes);
      index_.emplace(entry.name, entries_.size());
      entries_.push_back(std::move(entry));
    }
    const auto table_end = static_cast<std::uint64_t>(in.tellg());
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 0; i < spans.size(); ++i) {
      const bool into_table = spans[i].first < table_end && spans[i].second > spans[i].first;
      const bool overlaps = i > 0 && spans[i].first < spans[i - 1].second;
      if (into_table || overlaps) {
        throw ContainerError(K::OverlappingPayload,
                             detail::concat("'", path.string(), "': overlapping payload at byte ",
                                            spans[i].first));
      }
    }
  }

  const std::vector<GtfEntry>& entries() const { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::filesystem::path& path() const { return path_; }

  const GtfEntry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContainerError(ContainerError::Kind::MissingEntry,
                           detail::concat("'", path_.string(), "': no entry named '", name, "'"));
    }
    return entries_[it->second];
  }

  StoredTensor read(const std::string& name) const {
    const auto& e = entry(name);
    std::ifstream in(path_, std::ios::binary);
    std::vector<char> buf(e.nbytes);
    in.seekg(static_cast<std::streamoff>(e.offset));
    if (!in || !in.read(buf.data(), static_cast<std::streamsize>(buf.size()))) {
      throw ContainerError(ContainerError::Kind::Io,
                           detail::concat("'", path_.string(), "': failed reading '", name, "'"));
    }
    const std::size_t n = shape_numel(e.shape);
    if (e.dtype == DType::F32) {
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = detail::get_le<float>(buf.data() + 4 * i);
      return Tensor<float>(e.shape, std::move(v));
    }
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = detail::get_le<double>(buf.data() + 8 * i);
    return Tensor<double>(e.shape, std::move(v));
  }

  template <typename Scalar>
  Tensor<Scalar> read_as(const std::string& name) const {
    return stored_as<Scalar>(read(name));
  }

 private:
  std::filesystem::path path_;
  std::vector<GtfEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

// In-memory container; entries keep insertion order on disk.
class TensorContainer {
 public:
  template <typename Scalar>
  void add(const std::string& name, Tensor<Scalar> t) {
    static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
    insert(name, StoredTensor(std::move(t)));
  }

  void insert(const std::string& name, StoredTensor t) {
    if (name.empty()) {
      throw ContainerError(ContainerError::Kind::BadEntry, "empty tensor name");
    }
    if (index_.count(name)) {
      throw ContainerError(ContainerError::Kind::DuplicateName,
                           detail::concat("duplicate entry name '", name, "'"));
    }
    if (stored_shape(t).size() > kGtfMaxRank) {
      throw ContainerError(ContainerError::Kind::BadEntry,
                           detail::concat("entry '", name, "' exceeds max rank"));
    }
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, StoredTensor>>& entries() const { return entries_; }

  const StoredTensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
      throw ContainerError(ContainerError::Kind::MissingEntry,
                           detail::concat("no entry named '", name, "'"));
    }
    return entries_[it->second].second;
  }

  template <typename Scalar>
  Tensor<Scalar> get_as(const std::string& name) const {
    return stored_as<Scalar>(get(name));
  }

  std::vector<char> encode() const {
    std::vector<char> buf(kGtfMagic, kGtfMagic + 4);
    detail::put_le<std::uint32_t>(buf, kGtfVersion);
    detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(entries_.size()));
    std::uint64_t table = buf.size();
    for (const auto& [name, t] : entries_) {
      table += 4 + name.size() + 4 + 8 * stored_shape(t).size() + 16;
    }
    std::uint64_t offset = table;
    for (const auto& [name, t] : entries_) {
      const auto& shape = stored_shape(t);
      const auto dt = stored_dtype(t);
      const std::uint64_t nbytes = shape_numel(shape) * dtype_size(dt);
      detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
      buf.insert(buf.end(), name.begin(), name.end());
      detail::put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(dt));
      detail::put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(shape.size()));
      detail::put_le<std::uint16_t>(buf, 0);
      for (std::size_t x : shape) detail::put_le<std::uint64_t>(buf, x);
      detail::put_le<std::uint64_t>(buf, offset);
      detail::put_le<std::uint64_t>(buf, nbytes);
      offset += nbytes;
    }
    for (const auto& [name, t] : entries_) {
      std::visit([&](const auto& x) {
        for (auto v : x.data()) detail::put_le(buf, v);
      }, t);
    }
    return buf;
  }

  // Writes to `path.partial`, then renames into place.
  void write(const std::filesystem::path& path) const {
    const auto bytes = encode();
    auto tmp = path;
    tmp += ".partial";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out || !out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()))) {
        throw ContainerError(ContainerError::Kind::Io,
                             detail::concat("cannot write '", tmp.string(), "'"));
      }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
      throw ContainerError(ContainerError::Kind::Io, detail::concat("cannot rename '", tmp.string(),
                                                                    "': ", ec.message()));
    }
  }

  static TensorContainer read(const std::filesystem::path& path) {
    ContainerReader reader(path);
    TensorContainer out;
    for (const auto& e : reader.entries()) out.insert(e.name, reader.read(e.name));
    return out;
  }

 private:
  std::vector<std::pair<std::string, StoredTensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mlground
