#pragma once

// Synthetic tiles for end-to-end checks: a planted multi-part school motif
// (two roof bars flanking a courtyard) on a cluttered background. Negatives
// carry the same clutter plus isolated motif parts as distractors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <tuple>
#include <vector>

#include "schoolmap/model.hpp"
#include "schoolmap/rng.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::synthetic {

using Rgb = std::array<float, 3>;

struct Style {
  Rgb roof{0.15f, 0.35f, 0.85f};
  Rgb courtyard{0.85f, 0.72f, 0.45f};
  Rgb ground{0.35f, 0.42f, 0.25f};
  Rgb house{0.55f, 0.30f, 0.22f};
};

// Three visually distinct regions for generalization experiments.
inline Style style_variant(int k) {
  Style s;
  switch (k % 3) {
    case 1:
      s.roof = {0.70f, 0.15f, 0.15f};
      s.ground = {0.55f, 0.48f, 0.32f};
      s.house = {0.45f, 0.45f, 0.45f};
      break;
    case 2:
      s.roof = {0.80f, 0.80f, 0.85f};
      s.courtyard = {0.65f, 0.45f, 0.30f};
      s.ground = {0.25f, 0.35f, 0.22f};
      break;
    default:
      break;
  }
  return s;
}

struct SynthConfig {
  int size = 64;
  int margin = 12;      // motif center lies in [margin, size - margin]
  int houses_min = 3;
  int houses_max = 8;
  double noise = 0.04;
  double distractor_p = 0.5;
  Style style{};
};

struct SynthTile {
  Tensor image;      // [3, S, S]
  int label = 0;     // 1 = school
  double cx = -1.0;  // motif center in pixel coordinates (positives only)
  double cy = -1.0;
};

namespace detail {

inline void fill_rect(Tensor& t, int x0, int y0, int w, int h, const Rgb& c) {
  const int S = static_cast<int>(t.dim(1));
  for (int y = std::max(0, y0); y < std::min(S, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(S, x0 + w); ++x)
      for (int k = 0; k < 3; ++k) t.at(k, y, x) = c[k];
}

}  // namespace detail

// Motif extent: roof bars 12x3 around a 12x6 courtyard, 12x12 overall.
inline constexpr int kMotifLong = 12;

// `center` pins a positive's motif center (it may lie partly off the tile);
// the random stream is drawn identically either way.
inline SynthTile make_tile(std::uint64_t seed, int label, const SynthConfig& cfg = {},
                           std::optional<std::array<int, 2>> center = std::nullopt) {
  std::mt19937_64 rng(schoolmap::rng::splitmix64(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto ri = [&](int lo, int hi) {  // inclusive
    return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };
  const int S = cfg.size;
  SynthTile tile{Tensor({3, std::size_t(S), std::size_t(S)}), label};
  Tensor& t = tile.image;
  const auto& st = cfg.style;

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const float shade = static_cast<float>(0.9 + 0.2 * u(rng));
      for (int k = 0; k < 3; ++k) t.at(k, y, x) = st.ground[k] * shade;
    }
  const int houses = ri(cfg.houses_min, cfg.houses_max);
  for (int i = 0; i < houses; ++i) {
    detail::fill_rect(t, ri(0, S - 4), ri(0, S - 4), ri(3, 5), ri(3, 5), st.house);
  }
  // A track across the tile.
  if (u(rng) < 0.5) {
    const bool horiz = u(rng) < 0.5;
    const int at = ri(4, S - 6);
    if (horiz) detail::fill_rect(t, 0, at, S, 2, {0.5f, 0.5f, 0.5f});
    else detail::fill_rect(t, at, 0, 2, S, {0.5f, 0.5f, 0.5f});
  }
  auto place = [&](int cx, int cy, bool horiz, bool roofs, bool yard) {
    // Bars along the long axis, courtyard in between.
    const int L = kMotifLong, half = L / 2;
    if (horiz) {
      if (roofs) {
        detail::fill_rect(t, cx - half, cy - 6, L, 3, st.roof);
        detail::fill_rect(t, cx - half, cy + 3, L, 3, st.roof);
      }
      if (yard) detail::fill_rect(t, cx - half, cy - 3, L, 6, st.courtyard);
    } else {
      if (roofs) {
        detail::fill_rect(t, cx - 6, cy - half, 3, L, st.roof);
        detail::fill_rect(t, cx + 3, cy - half, 3, L, st.roof);
      }
      if (yard) detail::fill_rect(t, cx - 3, cy - half, 6, L, st.courtyard);
    }
  };
  if (label == 1) {
    int cx = ri(cfg.margin, S - cfg.margin), cy = ri(cfg.margin, S - cfg.margin);
    if (center) std::tie(cx, cy) = std::pair{(*center)[0], (*center)[1]};
    place(cx, cy, u(rng) < 0.5, true, true);
    tile.cx = cx - 0.5;  // the motif spans pixels [c-6, c+6)
    tile.cy = cy - 0.5;
  } else if (u(rng) < cfg.distractor_p) {
    // A lone roof bar or a lone courtyard.
    const int cx = ri(cfg.margin, S - cfg.margin), cy = ri(cfg.margin, S - cfg.margin);
    const bool horiz = u(rng) < 0.5;
    if (u(rng) < 0.5) {
      if (horiz) detail::fill_rect(t, cx - 6, cy - 1, kMotifLong, 3, st.roof);
      else detail::fill_rect(t, cx - 1, cy - 6, 3, kMotifLong, st.roof);
    } else {
      place(cx, cy, horiz, false, true);
    }
  }
  std::normal_distribution<double> n(0.0, cfg.noise);
  for (auto& v : t.data()) v = static_cast<float>(std::clamp(v + n(rng), 0.0, 1.0));
  return tile;
}

// Label 1 for every `ratio + 1`-th tile (1:ratio school to non-school).
inline std::vector<SynthTile> make_dataset(std::size_t n, std::uint64_t seed,
                                           const SynthConfig& cfg = {}, int ratio = 2) {
  std::vector<SynthTile> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = i % static_cast<std::size_t>(ratio + 1) == 0 ? 1 : 0;
    out.push_back(make_tile(rng::mix(seed, i), label, cfg));
  }
  return out;
}

inline std::vector<model::Sample> to_samples(const std::vector<SynthTile>& tiles) {
  std::vector<model::Sample> out;
  out.reserve(tiles.size());
  for (const auto& t : tiles) out.push_back({t.image, t.label});
  return out;
}

}  // namespace schoolmap::synthetic
