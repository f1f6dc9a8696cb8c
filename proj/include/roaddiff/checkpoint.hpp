#pragma once

// Parameter checkpoint: a binary container of named shapes + little-endian
// float64 values, and a JSON manifest beside it.
//
// Binary layout:
//   "RDCK" | u32 version | u64 count
//   per entry: u64 name_len | name | u64 rows | u64 cols | rows*cols f64

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "roaddiff/errors.hpp"
#include "roaddiff/optim.hpp"

namespace roaddiff {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>) {
    bits = std::bit_cast<std::uint64_t>(v);
  } else {
    bits = static_cast<std::uint64_t>(v);
  }
  for (std::size_t b = 0; b < sizeof(T); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}
  std::uint64_t u(std::size_t width) {
    need(width);
    std::uint64_t v = 0;
    for (std::size_t b = 0; b < width; ++b)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += width;
    return v;
  }
  double f64() { return std::bit_cast<double>(u(8)); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_params(const ParamStore& store) {
  std::string out = "RDCK";
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, store.size());
  for (const auto& e : store.entries()) {
    detail::put_le<std::uint64_t>(out, e.name.size());
    out += e.name;
    detail::put_le<std::uint64_t>(out, e.value.rows());
    detail::put_le<std::uint64_t>(out, e.value.cols());
    for (double v : e.value.values()) detail::put_le<double>(out, v);
  }
  return out;
}

// Loads values into an already-initialised store with the same layout.
inline void deserialize_params(const std::string& bytes, ParamStore& store) {
  detail::Reader r(bytes);
  if (r.str(4) != "RDCK") throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = r.u(4);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.u(8);
  if (count != store.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                          std::to_string(store.size()));
  for (auto& e : store.entries()) {
    const auto name = r.str(r.u(8));
    const auto rows = r.u(8), cols = r.u(8);
    if (name != e.name) throw CheckpointError("checkpoint tensor '" + name + "' where '" + e.name + "' expected");
    if (rows != e.value.rows() || cols != e.value.cols())
      throw CheckpointError("checkpoint tensor '" + name + "' has shape [" + std::to_string(rows) + "x" +
                            std::to_string(cols) + "], model expects " + e.value.shape().str());
    auto dst = e.value.mutable_values();
    for (auto& v : dst) v = r.f64();
  }
  if (!r.done()) throw CheckpointError("trailing bytes in checkpoint");
}

inline nlohmann::json param_manifest(const ParamStore& store) {
  nlohmann::json arr = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : store.entries()) {
    arr.push_back({{"name", e.name}, {"shape", {e.value.rows(), e.value.cols()}}, {"offset", offset}});
    offset += e.value.size();
  }
  return arr;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace roaddiff
