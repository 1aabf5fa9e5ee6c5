#pragma once

// Training-time augmentation on channel-first [C, S, S] images: flips,
// quarter turns and free-angle rotation (bilinear, reflect padding).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "schoolmap/error.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::augment {

struct AugmentConfig {
  double hflip_p = 0.5;
  double vflip_p = 0.5;
  bool quarter_turns = true;
  double rotate_p = 0.5;
  double max_angle_deg = 360.0;  // angle ~ U[0, max_angle_deg)
};

inline void require_square(const Tensor& t) {
  if (t.rank() != 3 || t.dim(1) != t.dim(2)) {
    throw DataError("augmentation needs a square [C, S, S] image, got " + shape_string(t.shape()));
  }
}

inline Tensor hflip(const Tensor& t) {
  require_square(t);
  Tensor out(t.shape());
  const std::size_t C = t.dim(0), S = t.dim(1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) out.at(c, y, x) = t.at(c, y, S - 1 - x);
  return out;
}

inline Tensor vflip(const Tensor& t) {
  require_square(t);
  Tensor out(t.shape());
  const std::size_t C = t.dim(0), S = t.dim(1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) out.at(c, y, x) = t.at(c, S - 1 - y, x);
  return out;
}

// Counter-clockwise by k quarter turns.
inline Tensor rot90(const Tensor& t, int k) {
  require_square(t);
  k = ((k % 4) + 4) % 4;
  if (k == 0) return t;
  Tensor out(t.shape());
  const std::size_t C = t.dim(0), S = t.dim(1);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        // Source pixel that lands on (y, x).
        std::size_t sy = y, sx = x;
        switch (k) {
          case 1: sy = x; sx = S - 1 - y; break;
          case 2: sy = S - 1 - y; sx = S - 1 - x; break;
          case 3: sy = S - 1 - x; sx = y; break;
        }
        out.at(c, y, x) = t.at(c, sy, sx);
      }
  return out;
}

// Mirror a continuous coordinate into [0, n-1] without repeating the edge.
inline double reflect_coord(double v, std::size_t n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * static_cast<double>(n - 1);
  v = std::fmod(std::abs(v), period);
  return v > static_cast<double>(n - 1) ? period - v : v;
}

// Counter-clockwise rotation about the image center.
inline Tensor rotate(const Tensor& t, double angle_deg) {
  require_square(t);
  Tensor out(t.shape());
  const std::size_t C = t.dim(0), S = t.dim(1);
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double ca = std::cos(a), sa = std::sin(a);
  const double ctr = 0.5 * static_cast<double>(S - 1);
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      // Inverse map with y pointing down.
      const double dx = static_cast<double>(x) - ctr, dy = static_cast<double>(y) - ctr;
      const double sx = reflect_coord(ctr + ca * dx - sa * dy, S);
      const double sy = reflect_coord(ctr + sa * dx + ca * dy, S);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t x1 = std::min(x0 + 1, S - 1), y1 = std::min(y0 + 1, S - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < C; ++c) {
        const double v = (1 - fy) * ((1 - fx) * t.at(c, y0, x0) + fx * t.at(c, y0, x1)) +
                         fy * ((1 - fx) * t.at(c, y1, x0) + fx * t.at(c, y1, x1));
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

template <typename Rng>
Tensor random_augment(const Tensor& image, const AugmentConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t = image;
  if (u(rng) < cfg.hflip_p) t = hflip(t);
  if (u(rng) < cfg.vflip_p) t = vflip(t);
  if (cfg.quarter_turns) t = rot90(t, static_cast<int>(rng() % 4));
  if (u(rng) < cfg.rotate_p) t = rotate(t, u(rng) * cfg.max_angle_deg);
  return t;
}

}  // namespace schoolmap::augment
