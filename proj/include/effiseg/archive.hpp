#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "effiseg/parameters.hpp"

namespace effiseg {

inline constexpr std::string_view kCheckpointFormat = "effiseg-ckpt-1";
inline constexpr std::string_view kWeightsFormat = "effiseg-weights-1";

/// Named tensors plus a JSON manifest in one binary file.
///
/// Layout (little-endian):
///   format line "<format>\n"
///   u64 manifest length, manifest JSON bytes
///   u64 entry count, then per entry:
///     u32 name length, name, i64 x4 shape, u8 dtype (4 = f32, 8 = f64), u64 byte count, raw values
///   u64 FNV-1a of every preceding byte
class TensorArchive {
 public:
  struct Entry {
    Shape4 shape;
    std::uint8_t dtype = 4;
    std::vector<char> bytes;
  };

  nlohmann::json manifest = nlohmann::json::object();

  template <typename Scalar>
  void put(const std::string& name, const Tensor4<Scalar>& t) {
    static_assert(sizeof(Scalar) == 4 || sizeof(Scalar) == 8);
    Entry e;
    e.shape = t.shape();
    e.dtype = sizeof(Scalar);
    e.bytes.resize(sizeof(Scalar) * static_cast<std::size_t>(t.size()));
    std::memcpy(e.bytes.data(), t.data(), e.bytes.size());
    if (entries_.find(name) == entries_.end()) order_.push_back(name);
    entries_[name] = std::move(e);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& entry(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  /// Values converted to `Scalar`; bitwise when the stored dtype matches.
  template <typename Scalar>
  Tensor4<Scalar> get(const std::string& name) const {
    const Entry& e = entry(name);
    Tensor4<Scalar> t(e.shape);
    if (e.dtype == sizeof(Scalar)) {
      std::memcpy(t.data(), e.bytes.data(), e.bytes.size());
    } else if (e.dtype == 4) {
      Eigen::Map<const ArrayX<float>> src(reinterpret_cast<const float*>(e.bytes.data()), t.size());
      t.array() = src.template cast<Scalar>();
    } else {
      Eigen::Map<const ArrayX<double>> src(reinterpret_cast<const double*>(e.bytes.data()), t.size());
      t.array() = src.template cast<Scalar>();
    }
    return t;
  }

  void save(const std::filesystem::path& path, std::string_view format) const;
  /// Throws IoError on a missing file, a different format/version, truncation or checksum mismatch.
  static TensorArchive load(const std::filesystem::path& path, std::string_view format);

 private:
  std::map<std::string, Entry> entries_;
  std::vector<std::string> order_;
};

/// Stores every parameter and buffer of `reg` under `prefix + name`.
template <typename Scalar>
void store_registry(TensorArchive& archive, const ParameterRegistry<Scalar>& reg, const std::string& prefix = "") {
  for (const auto& p : reg.parameters) archive.put(prefix + p.name, p.var->value());
  for (const auto& b : reg.buffers) archive.put(prefix + b.name, *b.tensor);
}

/// Overwrites every parameter and buffer of `reg` from the archive. Missing
/// names or shape mismatches throw IoError; extra archive entries are ignored.
template <typename Scalar>
void restore_registry(const TensorArchive& archive, ParameterRegistry<Scalar>& reg, const std::string& prefix = "") {
  auto fetch = [&](const std::string& name, Tensor4<Scalar>& dst) {
    const std::string key = prefix + name;
    if (!archive.contains(key)) throw IoError("archive is missing tensor '" + key + "'");
    Tensor4<Scalar> t = archive.get<Scalar>(key);
    if (t.shape() != dst.shape()) {
      throw IoError("tensor '" + key + "' has shape " + t.shape().str() + ", expected " + dst.shape().str());
    }
    dst = std::move(t);
  };
  for (auto& p : reg.parameters) fetch(p.name, p.var->value());
  for (auto& b : reg.buffers) fetch(b.name, *b.tensor);
}

}  // namespace effiseg
