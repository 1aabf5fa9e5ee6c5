#pragma once

// Country-scale sweep: a half-overlapping tile lattice over a boundary,
// settlement prefiltering, scoring and localization above a threshold, and
// buffer-overlap aggregation of the resulting points.
//
// The lattice lives in Web Mercator meters and is anchored at the projected
// bounding-box min corner, with origins at anchor + k * stride for k >= -1
// per axis. Every interior point is therefore covered by exactly two tiles
// per axis.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "schoolmap/bundle.hpp"
#include "schoolmap/cam.hpp"
#include "schoolmap/cluster.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/geo.hpp"
#include "schoolmap/geojson.hpp"
#include "schoolmap/parallel.hpp"
#include "schoolmap/raster.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::nationwide {

using nlohmann::json;

struct Tile {
  std::string id;  // r{row}_c{col}
  int row = 0;     // 0 = northern-most lattice row
  int col = 0;     // 0 = western-most lattice column
  geo::TileSpec spec;
};

struct TileGrid {
  geo::ProjectedPoint anchor;  // projected bbox min corner of the boundary
  double size_m = 300.0;
  double stride_m = 150.0;
  int rows = 0, cols = 0;      // full lattice extent, emitted or not
  std::vector<Tile> tiles;     // row-major, north to south
};

struct TilingConfig {
  double size_m = 300.0;
  double overlap = 0.5;
  int px = 500;

  double stride() const { return size_m * (1.0 - overlap); }

  void validate() const {
    if (!(size_m > 0.0)) throw ConfigError("tile size must be positive");
    if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("tile overlap must lie in [0, 1)");
    if (px <= 0) throw ConfigError("tile pixel count must be positive");
  }
};

inline std::string tile_id(int row, int col) {
  return "r" + std::to_string(row) + "_c" + std::to_string(col);
}

namespace detail {

using PRing = std::vector<geo::ProjectedPoint>;

struct PPolygon {
  PRing outer;
  std::vector<PRing> holes;
};

struct Rect {
  double x0, y0, x1, y1;
};

// Sutherland-Hodgman against one axis-aligned half-plane.
template <typename Inside, typename Cross>
PRing clip_edge(const PRing& in, Inside inside, Cross cross) {
  PRing out;
  if (in.empty()) return out;
  out.reserve(in.size() + 4);
  geo::ProjectedPoint prev = in.back();
  bool prev_in = inside(prev);
  for (const auto& cur : in) {
    const bool cur_in = inside(cur);
    if (cur_in != prev_in) out.push_back(cross(prev, cur));
    if (cur_in) out.push_back(cur);
    prev = cur;
    prev_in = cur_in;
  }
  return out;
}

inline PRing clip(const PRing& ring, const Rect& r) {
  auto at_x = [](double x) {
    return [x](const geo::ProjectedPoint& a, const geo::ProjectedPoint& b) {
      const double t = (x - a.x) / (b.x - a.x);
      return geo::ProjectedPoint{x, a.y + t * (b.y - a.y)};
    };
  };
  auto at_y = [](double y) {
    return [y](const geo::ProjectedPoint& a, const geo::ProjectedPoint& b) {
      const double t = (y - a.y) / (b.y - a.y);
      return geo::ProjectedPoint{a.x + t * (b.x - a.x), y};
    };
  };
  PRing out = clip_edge(ring, [&](const geo::ProjectedPoint& p) { return p.x >= r.x0; }, at_x(r.x0));
  out = clip_edge(out, [&](const geo::ProjectedPoint& p) { return p.x <= r.x1; }, at_x(r.x1));
  out = clip_edge(out, [&](const geo::ProjectedPoint& p) { return p.y >= r.y0; }, at_y(r.y0));
  return clip_edge(out, [&](const geo::ProjectedPoint& p) { return p.y <= r.y1; }, at_y(r.y1));
}

// Shoelace about the first vertex; Mercator coordinates are ~1e6 m, so
// absolute products would cancel at the 1e-3 m^2 level.
inline double area(const PRing& ring) {
  if (ring.size() < 3) return 0.0;
  const auto o = ring.front();
  double s = 0.0;
  for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
    s += (ring[j].x - o.x) * (ring[i].y - o.y) - (ring[i].x - o.x) * (ring[j].y - o.y);
  }
  return std::abs(s) / 2.0;
}

inline double clipped_area(std::span<const PPolygon> polys, const Rect& r) {
  double a = 0.0;
  for (const auto& p : polys) {
    a += area(clip(p.outer, r));
    for (const auto& h : p.holes) a -= area(clip(h, r));
  }
  return a;
}

inline std::vector<PPolygon> clip_all(std::span<const PPolygon> polys, const Rect& r) {
  std::vector<PPolygon> out;
  for (const auto& p : polys) {
    PPolygon c{clip(p.outer, r), {}};
    if (c.outer.size() < 3) continue;
    for (const auto& h : p.holes) {
      auto ch = clip(h, r);
      if (ch.size() >= 3) c.holes.push_back(std::move(ch));
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<PPolygon> project_all(std::span<const geojson::Polygon> polys) {
  std::vector<PPolygon> out;
  auto proj = [](const geojson::Ring& r) {
    PRing pr;
    for (const auto& g : r) {
      if (!geo::is_valid(g)) throw DataError("boundary vertex outside WGS84 range");
      pr.push_back(geo::project(g));
    }
    return pr;
  };
  for (const auto& p : polys) {
    PPolygon q{proj(p.outer), {}};
    for (const auto& h : p.holes) q.holes.push_back(proj(h));
    out.push_back(std::move(q));
  }
  return out;
}

inline std::uint64_t cell_key(long long ix, long long iy) {
  return (static_cast<std::uint64_t>(ix + (1LL << 31)) << 32) ^ static_cast<std::uint64_t>(iy + (1LL << 31));
}

}  // namespace detail

// A tile is emitted iff its intersection with the boundary (holes removed)
// has positive area. Slivers under 1e-9 of a tile's area count as touching.
inline TileGrid generate_tiles(std::span<const geojson::Polygon> boundary, const TilingConfig& cfg = {}) {
  cfg.validate();
  const auto polys = detail::project_all(boundary);
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
  double total = 0.0;
  for (const auto& p : polys) {
    if (p.outer.size() < 3) throw DataError("boundary ring needs at least 3 vertices");
    for (const auto& v : p.outer) {
      x0 = std::min(x0, v.x);
      y0 = std::min(y0, v.y);
      x1 = std::max(x1, v.x);
      y1 = std::max(y1, v.y);
    }
    total += detail::area(p.outer);
    for (const auto& h : p.holes) total -= detail::area(h);
  }
  if (polys.empty() || !(total > 0.0)) throw DataError("boundary is empty or has zero area");

  TileGrid g;
  g.anchor = {x0, y0};
  g.size_m = cfg.size_m;
  g.stride_m = cfg.stride();
  const double s = g.stride_m;
  // Lattice index k runs from -1 while the origin stays below the max edge.
  const long long kx = std::max(1LL, static_cast<long long>(std::ceil((x1 - x0) / s - 1e-9)));
  const long long ky = std::max(1LL, static_cast<long long>(std::ceil((y1 - y0) / s - 1e-9)));
  const long long nx = kx + 1, ny = ky + 1;
  if (nx * ny > (1LL << 34)) throw DataError("tile lattice too large");
  g.cols = static_cast<int>(nx);
  g.rows = static_cast<int>(ny);
  const double eps = 1e-9 * cfg.size_m * cfg.size_m;
  auto origin_x = [&](long long ix) { return x0 + static_cast<double>(ix - 1) * s; };
  auto origin_y = [&](long long iy) { return y0 + static_cast<double>(iy - 1) * s; };

  // Clip to blocks of lattice cells first so per-tile clipping sees only the
  // local part of the boundary.
  constexpr long long kBlock = 16;
  for (long long by = (ny - 1) / kBlock; by >= 0; --by) {
    std::vector<std::vector<Tile>> rows_out(kBlock);
    for (long long bx = 0; bx * kBlock < nx; ++bx) {
      const long long ix_lo = bx * kBlock, ix_hi = std::min(nx, ix_lo + kBlock);
      const long long iy_lo = by * kBlock, iy_hi = std::min(ny, iy_lo + kBlock);
      const detail::Rect block{origin_x(ix_lo), origin_y(iy_lo), origin_x(ix_hi - 1) + cfg.size_m,
                               origin_y(iy_hi - 1) + cfg.size_m};
      const auto local = detail::clip_all(polys, block);
      if (local.empty() || detail::clipped_area(local, block) <= eps) continue;
      for (long long iy = iy_hi - 1; iy >= iy_lo; --iy) {
        for (long long ix = ix_lo; ix < ix_hi; ++ix) {
          const detail::Rect r{origin_x(ix), origin_y(iy), origin_x(ix) + cfg.size_m,
                               origin_y(iy) + cfg.size_m};
          if (detail::clipped_area(local, r) <= eps) continue;
          Tile t;
          t.row = static_cast<int>(ny - 1 - iy);
          t.col = static_cast<int>(ix);
          t.id = tile_id(t.row, t.col);
          t.spec = geo::TileSpec{{r.x0, r.y0}, cfg.size_m, cfg.px, cfg.size_m / cfg.px};
          rows_out[static_cast<std::size_t>(iy_hi - 1 - iy)].push_back(std::move(t));
        }
      }
    }
    for (auto& row : rows_out) {
      for (auto& t : row) g.tiles.push_back(std::move(t));
    }
  }
  return g;
}

inline TileGrid generate_tiles(const geojson::Polygon& boundary, const TilingConfig& cfg = {}) {
  return generate_tiles(std::span<const geojson::Polygon>(&boundary, 1), cfg);
}

struct PrefilterResult {
  std::vector<Tile> kept;  // grid order
  std::size_t dropped = 0;
};

// Keeps a tile iff some nonzero cell center of any raster lies in it, with
// tile extents half-open: [min, min + size).
inline PrefilterResult prefilter_tiles(const TileGrid& grid, std::span<const RasterGrid> rasters) {
  std::unordered_map<std::uint64_t, std::size_t> index;
  index.reserve(grid.tiles.size());
  for (std::size_t i = 0; i < grid.tiles.size(); ++i) {
    const auto& t = grid.tiles[i];
    index.emplace(detail::cell_key(t.col, grid.rows - 1 - t.row), i);
  }
  std::vector<char> keep(grid.tiles.size(), 0);
  const double s = grid.stride_m;
  const long long span = static_cast<long long>(std::ceil(grid.size_m / s - 1e-9));
  for (const auto& r : rasters) {
    r.validate();
    for (int row = 0; row < r.height; ++row) {
      for (int col = 0; col < r.width; ++col) {
        if (r.at(row, col) == 0) continue;
        const auto c = r.cell_center(row, col);
        // Lattice index of origin <= c, shifted by the k = -1 phase.
        const long long fx = static_cast<long long>(std::floor((c.x - grid.anchor.x) / s)) + 1;
        const long long fy = static_cast<long long>(std::floor((c.y - grid.anchor.y) / s)) + 1;
        for (long long ix = fx - span; ix <= fx; ++ix) {
          for (long long iy = fy - span; iy <= fy; ++iy) {
            const auto it = index.find(detail::cell_key(ix, iy));
            if (it == index.end()) continue;
            const auto& spec = grid.tiles[it->second].spec;
            if (c.x >= spec.min_corner.x && c.x < spec.max_x() && c.y >= spec.min_corner.y &&
                c.y < spec.max_y()) {
              keep[it->second] = 1;
            }
          }
        }
      }
    }
  }
  PrefilterResult out;
  for (std::size_t i = 0; i < grid.tiles.size(); ++i) {
    if (keep[i]) out.kept.push_back(grid.tiles[i]);
    else ++out.dropped;
  }
  return out;
}

// --- imagery ----------------------------------------------------------------------

class ImageStore {
 public:
  virtual ~ImageStore() = default;
  // nullopt when no imagery exists for the tile.
  virtual std::optional<Tensor> load(const std::string& tile_id) const = 0;
};

// <dir>/<tile id>.gten
class DirectoryImageStore : public ImageStore {
 public:
  explicit DirectoryImageStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!std::filesystem::is_directory(dir_)) {
      throw DataError("image store '" + dir_.string() + "' is not a directory");
    }
  }

  std::optional<Tensor> load(const std::string& tile_id) const override {
    const auto p = dir_ / (tile_id + ".gten");
    if (!std::filesystem::exists(p)) return std::nullopt;
    return read_tensor(p.string());
  }

 private:
  std::filesystem::path dir_;
};

// --- sweep ----------------------------------------------------------------------

struct PredictionPoint {
  geo::GeoPoint location;
  double probability = 0.0;
  std::string tile_id;
  double cam_peak = 0.0;
  bool degenerate_fallback = false;  // location is the tile center

  friend bool operator==(const PredictionPoint&, const PredictionPoint&) = default;
};

struct SweepConfig {
  cam::Method method = cam::Method::gradcam;
  double tau = 0.5;
  std::size_t workers = 1;

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  }
};

struct SweepResult {
  std::vector<PredictionPoint> predictions;  // tile order
  std::vector<std::string> missing;          // tiles without imagery, tile order
  std::size_t scored = 0;
  std::size_t fallbacks = 0;
};

using SweepLog = std::function<void(const std::string& tile_id, const std::string& message)>;

inline SweepResult sweep(std::span<const Tile> tiles, const ImageStore& store, const Backend& backend,
                         const SweepConfig& cfg, const SweepLog& log = {}) {
  cfg.validate();
  struct Outcome {
    bool missing = false;
    std::optional<PredictionPoint> point;
  };
  std::vector<Outcome> slots(tiles.size());
  parallel_for(tiles.size(), cfg.workers, [&](std::size_t i) {
    const auto& tile = tiles[i];
    const auto image = store.load(tile.id);
    if (!image) {
      slots[i].missing = true;
      return;
    }
    const auto bundle = backend.infer(*image);
    bundle.validate();
    const double p = bundle.school_probability();
    if (!(p > cfg.tau)) return;
    const auto c = cam::compute_cam(cfg.method, bundle);
    PredictionPoint pt;
    pt.probability = p;
    pt.tile_id = tile.id;
    if (c.degenerate) {
      pt.location = geo::unproject(tile.spec.center());
      pt.degenerate_fallback = true;
    } else {
      const auto peak = cam::peak_to_geo(cam::upsample(c, static_cast<std::size_t>(tile.spec.px)), tile.spec);
      pt.location = peak.location;
      pt.cam_peak = peak.value;
    }
    slots[i].point = std::move(pt);
  });
  SweepResult out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].missing) {
      out.missing.push_back(tiles[i].id);
      if (log) log(tiles[i].id, "no imagery; tile skipped");
      continue;
    }
    ++out.scored;
    if (slots[i].point) {
      if (slots[i].point->degenerate_fallback) {
        ++out.fallbacks;
        if (log) log(tiles[i].id, "degenerate CAM; using tile center");
      }
      out.predictions.push_back(std::move(*slots[i].point));
    }
  }
  return out;
}

// --- aggregation ------------------------------------------------------------------

struct AggregationConfig {
  double buffer_r = 50.0;

  void validate() const {
    if (!(buffer_r > 0.0)) throw ConfigError("aggregation buffer radius must be positive");
  }
};

// One survivor per buffer-overlap component: the highest probability, ties
// to the lexicographically smallest tile id, then the earliest input.
// Survivors keep input order.
inline std::vector<PredictionPoint> aggregate(std::span<const PredictionPoint> preds,
                                              const AggregationConfig& cfg = {}) {
  cfg.validate();
  std::vector<geo::GeoPoint> pts;
  pts.reserve(preds.size());
  for (const auto& p : preds) pts.push_back(p.location);
  const auto labels = overlap_components(pts, cfg.buffer_r);
  std::vector<std::size_t> winners;
  for (const auto& group : group_components(labels)) {
    std::size_t best = group.front();
    for (std::size_t i : group) {
      const auto& a = preds[i];
      const auto& b = preds[best];
      if (a.probability > b.probability || (a.probability == b.probability && a.tile_id < b.tile_id)) {
        best = i;
      }
    }
    winners.push_back(best);
  }
  std::sort(winners.begin(), winners.end());
  std::vector<PredictionPoint> out;
  out.reserve(winners.size());
  for (std::size_t i : winners) out.push_back(preds[i]);
  return out;
}

// --- serialization ----------------------------------------------------------------

inline json to_geojson(std::span<const PredictionPoint> preds) {
  std::vector<json> features;
  features.reserve(preds.size());
  for (const auto& p : preds) {
    features.push_back(geojson::point_feature(p.location, {{"probability", p.probability},
                                                           {"tile_id", p.tile_id},
                                                           {"degenerate_fallback", p.degenerate_fallback},
                                                           {"cam_peak", p.cam_peak}}));
  }
  return geojson::feature_collection(std::move(features));
}

inline std::vector<PredictionPoint> predictions_from_geojson(const json& doc) {
  if (doc.value("type", "") != "FeatureCollection" || !doc.contains("features")) {
    throw DataError("predictions must be a GeoJSON FeatureCollection");
  }
  std::vector<PredictionPoint> out;
  for (const auto& f : doc.at("features")) {
    try {
      const auto& c = f.at("geometry").at("coordinates");
      const auto& pr = f.at("properties");
      PredictionPoint p;
      p.location = {c.at(1).get<double>(), c.at(0).get<double>()};
      p.probability = pr.at("probability").get<double>();
      p.tile_id = pr.at("tile_id").get<std::string>();
      p.degenerate_fallback = pr.value("degenerate_fallback", false);
      p.cam_peak = pr.value("cam_peak", 0.0);
      if (!geo::is_valid(p.location)) throw DataError("coordinates outside WGS84 range");
      if (!(p.probability >= 0.0 && p.probability <= 1.0)) throw DataError("probability outside [0, 1]");
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw DataError("prediction feature " + std::to_string(out.size()) + ": " + e.what());
    }
  }
  return out;
}

// Tile polygons with their exact projected extents in the properties.
inline json tiles_to_geojson(const TileGrid& g, std::span<const Tile> tiles) {
  std::vector<json> features;
  features.reserve(tiles.size());
  for (const auto& t : tiles) {
    const auto& s = t.spec;
    const geojson::Ring ring{geo::unproject({s.min_corner.x, s.min_corner.y}),
                             geo::unproject({s.max_x(), s.min_corner.y}),
                             geo::unproject({s.max_x(), s.max_y()}),
                             geo::unproject({s.min_corner.x, s.max_y()})};
    features.push_back({{"type", "Feature"},
                        {"geometry", geojson::polygon_geometry(ring)},
                        {"properties",
                         {{"tile_id", t.id},
                          {"row", t.row},
                          {"col", t.col},
                          {"min_x", s.min_corner.x},
                          {"min_y", s.min_corner.y},
                          {"size_m", s.size_m},
                          {"px", s.px}}}});
  }
  auto doc = geojson::feature_collection(std::move(features));
  doc["lattice"] = {{"anchor_x", g.anchor.x}, {"anchor_y", g.anchor.y}, {"size_m", g.size_m},
                    {"stride_m", g.stride_m}, {"rows", g.rows},        {"cols", g.cols}};
  return doc;
}

inline std::vector<Tile> tiles_from_geojson(const json& doc) {
  std::vector<Tile> out;
  try {
    for (const auto& f : doc.at("features")) {
      const auto& p = f.at("properties");
      Tile t;
      t.id = p.at("tile_id").get<std::string>();
      t.row = p.at("row").get<int>();
      t.col = p.at("col").get<int>();
      const double size = p.at("size_m").get<double>();
      const int px = p.at("px").get<int>();
      t.spec = geo::TileSpec{{p.at("min_x").get<double>(), p.at("min_y").get<double>()}, size, px, size / px};
      t.spec.validate();
      out.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("tile collection: ") + e.what());
  }
  return out;
}

struct StageCounts {
  std::size_t lattice = 0;      // rows * cols
  std::size_t in_boundary = 0;  // emitted by generate_tiles
  std::size_t settled = 0;      // kept by the prefilter
  std::size_t scored = 0;
  std::size_t missing = 0;
  std::size_t above_tau = 0;
  std::size_t fallbacks = 0;
  std::size_t aggregated = 0;
};

inline json run_manifest(double tau, cam::Method method, const std::string& model_id,
                         const StageCounts& c, const AggregationConfig& agg) {
  return {{"tau_star", tau},
          {"cam_method", std::string(cam::to_string(method))},
          {"model_id", model_id},
          {"buffer_r_m", agg.buffer_r},
          {"tiles",
           {{"lattice", c.lattice},
            {"in_boundary", c.in_boundary},
            {"settled", c.settled},
            {"scored", c.scored},
            {"missing_imagery", c.missing},
            {"above_tau", c.above_tau},
            {"degenerate_fallback", c.fallbacks}}},
          {"aggregated_predictions", c.aggregated}};
}

}  // namespace schoolmap::nationwide
