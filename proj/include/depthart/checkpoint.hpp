#pragma once

// DART checkpoint container.
//
//   "DART" | version u32 | entry count u32 |
//   per entry: name length u16 | UTF-8 name | rank u8 | dims u32 x rank | f32 payload
//
// All integers and floats little-endian. Hyperparameters travel as rank-0
// entries holding one float.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "depthart/errors.hpp"
#include "depthart/tensor.hpp"

namespace depthart {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class Checkpoint {
 public:
  void put(const std::string& name, const Tensor& t) {
    if (name.size() > 0xFFFF) throw DataError("checkpoint: entry name too long");
    if (t.rank() > 0xFF) throw DataError("checkpoint: rank too large for " + name);
    if (index_.count(name)) throw DataError("checkpoint: duplicate entry " + name);
    index_[name] = entries_.size();
    entries_.emplace_back(name, t.detach());
  }

  void put_scalar(const std::string& name, double value) {
    put(name, Tensor(Shape{}, {static_cast<float>(value)}));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("checkpoint: missing entry '" + name + "'");
    return entries_[it->second].second;
  }

  float scalar(const std::string& name) const {
    const Tensor& t = get(name);
    if (t.numel() != 1) throw DataError("checkpoint: entry '" + name + "' is not a scalar");
    return t.data()[0];
  }

  /// Copies a stored tensor into `dst`, which must have the same shape.
  void load_into(const std::string& name, Tensor& dst) const {
    const Tensor& src = get(name);
    if (src.shape() != dst.shape())
      throw DataError("checkpoint: entry '" + name + "' has shape " + shape_str(src.shape()) + ", expected " +
                      shape_str(dst.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint: truncated data");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out = "DART";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries().size()));
  for (const auto& [name, t] : ckpt.entries()) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float f : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view in) {
  if (in.size() < 12 || in.substr(0, 4) != "DART") throw DataError("checkpoint: bad magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint32_t>(in, pos);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(in, pos);
  Checkpoint ckpt;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = detail::get_le<std::uint16_t>(in, pos);
    if (pos + len > in.size()) throw DataError("checkpoint: truncated name");
    std::string name(in.substr(pos, len));
    pos += len;
    const auto rank = detail::get_le<std::uint8_t>(in, pos);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get_le<std::uint32_t>(in, pos);
    const std::size_t n = numel_of(shape);
    if (pos + 4 * n > in.size()) throw DataError("checkpoint: truncated payload for " + name);
    std::vector<float> data(n);
    for (auto& f : data) f = std::bit_cast<float>(detail::get_le<std::uint32_t>(in, pos));
    ckpt.put(name, Tensor(std::move(shape), std::move(data)));
  }
  if (pos != in.size()) throw DataError("checkpoint: trailing bytes");
  return ckpt;
}

/// Writes to `path` through a temporary sibling and a rename, so readers
/// only ever see a complete file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace depthart
