#pragma once

// 8-bit grayscale PNG export for inspecting maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "schoolmap/error.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::png {

namespace detail {

inline void put_be32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_be32(const std::uint8_t* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

inline void chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::vector<std::uint8_t>& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const auto crc = crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<std::uint32_t>(crc));
}

inline constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

}  // namespace detail

// [H, W] values in [0, 1] -> round(255 v), clamped.
inline std::vector<std::uint8_t> encode_gray8(const Tensor& map) {
  if (map.rank() != 2) throw DataError("PNG export needs an [H, W] map, got " + shape_string(map.shape()));
  const std::size_t H = map.dim(0), W = map.dim(1);
  std::vector<std::uint8_t> raw;
  raw.reserve(H * (W + 1));
  for (std::size_t y = 0; y < H; ++y) {
    raw.push_back(0);  // filter: none
    for (std::size_t x = 0; x < W; ++x) {
      const double v = std::clamp(static_cast<double>(map.at(y, x)), 0.0, 1.0);
      raw.push_back(static_cast<std::uint8_t>(std::lround(255.0 * v)));
    }
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw Error(ErrorKind::internal, "zlib compression failed");
  }
  z.resize(zlen);

  std::vector<std::uint8_t> out(detail::kSignature, detail::kSignature + 8);
  std::vector<std::uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<std::uint32_t>(W));
  detail::put_be32(ihdr, static_cast<std::uint32_t>(H));
  ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});  // depth 8, grayscale, deflate, no filter, no interlace
  detail::chunk(out, "IHDR", ihdr);
  detail::chunk(out, "IDAT", z);
  detail::chunk(out, "IEND", {});
  return out;
}

struct Gray8 {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// Reads back files written by encode_gray8 (filter type 0 rows only).
inline Gray8 decode_gray8(const std::vector<std::uint8_t>& png) {
  if (png.size() < 8 || std::memcmp(png.data(), detail::kSignature, 8) != 0) {
    throw FormatError("bad PNG signature", 0);
  }
  Gray8 g;
  std::vector<std::uint8_t> idat;
  std::size_t off = 8;
  while (off + 12 <= png.size()) {
    const std::uint32_t len = detail::get_be32(png.data() + off);
    const std::string type(reinterpret_cast<const char*>(png.data() + off + 4), 4);
    if (off + 12 + len > png.size()) throw FormatError("truncated PNG chunk " + type, off);
    const std::uint8_t* data = png.data() + off + 8;
    const auto crc = crc32(0L, png.data() + off + 4, len + 4);
    if (crc != detail::get_be32(data + len)) throw FormatError("PNG CRC mismatch in " + type, off);
    if (type == "IHDR") {
      g.width = detail::get_be32(data);
      g.height = detail::get_be32(data + 4);
      if (data[8] != 8 || data[9] != 0) throw FormatError("only 8-bit grayscale PNG supported", off);
    } else if (type == "IDAT") {
      idat.insert(idat.end(), data, data + len);
    }
    off += 12 + len;
  }
  std::vector<std::uint8_t> raw(g.height * (g.width + 1));
  uLongf rlen = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &rlen, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      rlen != raw.size()) {
    throw FormatError("PNG image data does not inflate to the declared size", 0);
  }
  g.pixels.reserve(g.width * g.height);
  for (std::size_t y = 0; y < g.height; ++y) {
    if (raw[y * (g.width + 1)] != 0) throw FormatError("unsupported PNG row filter", 0);
    g.pixels.insert(g.pixels.end(), raw.begin() + y * (g.width + 1) + 1,
                    raw.begin() + (y + 1) * (g.width + 1));
  }
  return g;
}

inline void write_gray8(const Tensor& map, const std::string& path) {
  const auto bytes = encode_gray8(map);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write PNG '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace schoolmap::png
