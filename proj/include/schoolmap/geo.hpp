#pragma once

// Geodesy and tile geometry.
//
// Tiles live on a spherical Web Mercator grid so that a tile is a square in
// metric coordinates; point-to-point distances use haversine on WGS84
// latitude/longitude. The Mercator scale error grows as sec(lat), which is
// under 23% for |lat| <= 35.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "schoolmap/error.hpp"

namespace schoolmap::geo {

inline constexpr double kEarthRadiusM = 6'371'000.0;      // haversine sphere
inline constexpr double kMercatorRadiusM = 6'378'137.0;   // Web Mercator sphere
inline constexpr double kMercatorMaxLat = 85.06;
inline constexpr double kMercatorMaxX = 20'037'508.342789244;

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

struct ProjectedPoint {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const ProjectedPoint&, const ProjectedPoint&) = default;
};

inline bool is_valid(const GeoPoint& p) {
  return std::isfinite(p.lat) && std::isfinite(p.lon) && p.lat >= -90.0 &&
         p.lat <= 90.0 && p.lon >= -180.0 && p.lon <= 180.0;
}

inline double to_radians(double deg) { return deg * std::numbers::pi / 180.0; }
inline double to_degrees(double rad) { return rad * 180.0 / std::numbers::pi; }

inline double haversine_distance(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = to_radians(a.lat);
  const double phi2 = to_radians(b.lat);
  const double dphi = phi2 - phi1;
  const double dlambda = to_radians(b.lon - a.lon);
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  // Symmetric in (a, b): both squared sines and the cosine product commute.
  double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  if (h > 1.0) h = 1.0;
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

// Lower bound on haversine distance from the latitude difference alone.
inline double latitude_gap_m(double lat_a, double lat_b) {
  return kEarthRadiusM * to_radians(std::abs(lat_a - lat_b));
}

inline ProjectedPoint project(const GeoPoint& p) {
  if (!(std::abs(p.lat) < kMercatorMaxLat)) {
    throw DataError("latitude " + std::to_string(p.lat) +
                    " outside Web Mercator range (|lat| < 85.06)");
  }
  const double x = kMercatorRadiusM * to_radians(p.lon);
  const double y = kMercatorRadiusM *
                   std::log(std::tan(std::numbers::pi / 4.0 + to_radians(p.lat) / 2.0));
  return {x, y};
}

inline GeoPoint unproject(const ProjectedPoint& q) {
  const double lon = to_degrees(q.x / kMercatorRadiusM);
  const double lat =
      to_degrees(2.0 * std::atan(std::exp(q.y / kMercatorRadiusM)) - std::numbers::pi / 2.0);
  return {lat, lon};
}

// Ratio of projected meters to ground meters at a given latitude.
inline double mercator_scale(double lat_deg) { return 1.0 / std::cos(to_radians(lat_deg)); }

// Strict inequality: two points exactly 2r apart do not overlap, so 150 m
// buffers leave a 300 m minimum spacing after merging.
inline bool buffers_overlap(const GeoPoint& a, const GeoPoint& b, double radius_m) {
  return haversine_distance(a, b) < 2.0 * radius_m;
}

struct TileSpec {
  ProjectedPoint min_corner;
  double size_m = 300.0;
  int px = 500;
  double resolution_m_per_px = 0.6;

  double max_x() const { return min_corner.x + size_m; }
  double max_y() const { return min_corner.y + size_m; }
  ProjectedPoint center() const {
    return {min_corner.x + size_m / 2.0, min_corner.y + size_m / 2.0};
  }

  void validate() const {
    if (px <= 0) throw DataError("tile pixel count must be positive");
    if (std::abs(size_m - px * resolution_m_per_px) > 1e-9 * std::max(1.0, size_m)) {
      throw DataError("tile size " + std::to_string(size_m) + " m != " +
                      std::to_string(px) + " px * " +
                      std::to_string(resolution_m_per_px) + " m/px");
    }
  }

  // Square tile of `size_m` whose center projects from `center`.
  static TileSpec centered_on(const GeoPoint& center, double size_m = 300.0, int px = 500) {
    const ProjectedPoint c = project(center);
    return TileSpec{{c.x - size_m / 2.0, c.y - size_m / 2.0}, size_m, px, size_m / px};
  }
};

// Projected center of pixel (px, py); (0, 0) is the top-left (north-west) pixel.
inline ProjectedPoint pixel_center_projected(const TileSpec& tile, int px, int py) {
  if (px < 0 || py < 0 || px >= tile.px || py >= tile.px) {
    throw DataError("pixel (" + std::to_string(px) + ", " + std::to_string(py) +
                    ") outside " + std::to_string(tile.px) + " px tile");
  }
  const double res = tile.size_m / tile.px;
  return {tile.min_corner.x + (px + 0.5) * res, tile.max_y() - (py + 0.5) * res};
}

inline GeoPoint pixel_to_geo(const TileSpec& tile, int px, int py) {
  return unproject(pixel_center_projected(tile, px, py));
}

}  // namespace schoolmap::geo
