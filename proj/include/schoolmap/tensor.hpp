#pragma once

// Dense f32 tensors and the GTEN binary format:
//
//   "GTEN" | version u8 = 1 | dtype u8 = 0 (f32) | rank u8 |
//   rank x u32 LE dims | product(dims) x f32 LE, row-major

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "schoolmap/error.hpp"

namespace schoolmap {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != data_.size()) {
      throw DataError("tensor shape product " + std::to_string(count(shape_)) +
                      " != data length " + std::to_string(data_.size()));
    }
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  std::vector<float>& storage() { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D and 3-D row-major accessors.
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  float& at(std::size_t k, std::size_t r, std::size_t c) {
    return data_[(k * shape_[1] + r) * shape_[2] + c];
  }
  float at(std::size_t k, std::size_t r, std::size_t c) const {
    return data_[(k * shape_[1] + r) * shape_[2] + c];
  }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

namespace gten {

inline constexpr char kMagic[4] = {'G', 'T', 'E', 'N'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Tensor& t) {
  if (t.rank() > 255) throw DataError("GTEN supports rank <= 255");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(kDtypeF32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) {
    if (d > 0xffffffffULL) throw DataError("GTEN dimension exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * t.size());
  for (float f : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  return out;
}

inline Tensor decode(std::span<const std::uint8_t> buf) {
  if (buf.size() < 4) throw FormatError("truncated GTEN header", buf.size());
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("bad GTEN magic", 0);
  if (buf.size() < 7) throw FormatError("truncated GTEN header", buf.size());
  if (buf[4] != kVersion) {
    throw FormatError("unsupported GTEN version " + std::to_string(buf[4]), 4);
  }
  if (buf[5] != kDtypeF32) throw FormatError("unsupported GTEN dtype " + std::to_string(buf[5]), 5);
  const std::size_t rank = buf[6];
  std::size_t off = 7;
  if (buf.size() < off + 4 * rank) {
    throw FormatError("expected " + std::to_string(4 * rank) + " dimension bytes, found " +
                          std::to_string(buf.size() - off),
                      buf.size());
  }
  std::vector<std::size_t> shape(rank);
  for (std::size_t i = 0; i < rank; ++i, off += 4) shape[i] = detail::get_u32(buf.data() + off);
  const std::size_t n = Tensor::count(shape);
  const std::size_t want = 4 * n;
  const std::size_t have = buf.size() - off;
  if (have != want) {
    throw FormatError("expected " + std::to_string(want) + " payload bytes, found " +
                          std::to_string(have),
                      off + std::min(want, have));
  }
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i, off += 4) {
    data[i] = std::bit_cast<float>(detail::get_u32(buf.data() + off));
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace gten

inline void write_tensor(const Tensor& t, const std::string& path) {
  const auto bytes = gten::encode(t);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write tensor '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

inline Tensor read_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open tensor '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return gten::decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.detail(), e.offset());
  }
}

}  // namespace schoolmap
