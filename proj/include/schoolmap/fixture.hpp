#pragma once

// A small synthetic country for end-to-end runs: an L-shaped boundary, a
// settlement raster with SMOD-style codes, planted schools whose motifs are
// drawn into the tile imagery at their true positions, a raw government
// list with the usual defects, an OSM-style CSV, and a labeled training set
// rendered in the same style.
//
// Directory layout written by write_country:
//   boundary.geojson  settlement.asc  government.geojson  osm.csv
//   truth.geojson     images/<tile id>.gten    train/labels.csv + images

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "schoolmap/csv.hpp"
#include "schoolmap/geo.hpp"
#include "schoolmap/geojson.hpp"
#include "schoolmap/nationwide.hpp"
#include "schoolmap/raster.hpp"
#include "schoolmap/rng.hpp"
#include "schoolmap/synthetic.hpp"
#include "schoolmap/tileset.hpp"

namespace schoolmap::fixture {

using nlohmann::json;

struct CountryConfig {
  std::string code = "SYN";
  geo::GeoPoint center{-22.3, 24.7};
  double width_m = 4200.0;  // projected meters
  double height_m = 3000.0;
  double cell_m = 100.0;    // settlement raster resolution
  int clusters = 5;
  int schools = 10;
  double school_spacing_m = 600.0;  // keeps at most one school per tile
  int missing_from_government = 2;
  int government_only = 2;
  double government_jitter_m = 30.0;
  nationwide::TilingConfig tiling{300.0, 0.5, 64};
  synthetic::SynthConfig synth{};
  std::size_t train_tiles = 600;
  std::uint64_t seed = 7;

  void validate() const {
    if (!(width_m > 0.0 && height_m > 0.0)) throw ConfigError("fixture extent must be positive");
    if (!(cell_m > 0.0)) throw ConfigError("fixture cell size must be positive");
    if (schools < 1 || clusters < 1) throw ConfigError("fixture needs schools and clusters");
    if (missing_from_government < 0 || missing_from_government > schools) {
      throw ConfigError("missing_from_government must lie in [0, schools]");
    }
    if (government_only < 0) throw ConfigError("government_only must be non-negative");
    tiling.validate();
    if (tiling.px != synth.size) throw ConfigError("tile px must equal the synthetic tile size");
  }
};

struct PlantedSchool {
  std::string id;
  geo::GeoPoint location;
  bool in_government = true;
};

struct Country {
  std::vector<geojson::Polygon> boundary;
  RasterGrid settlement;  // SMOD codes; 0 = unsettled
  std::vector<PlantedSchool> schools;
  json government;        // raw FeatureCollection
  std::string osm_csv;
  nationwide::TileGrid grid;
  std::vector<nationwide::Tile> imaged;  // settled tiles with imagery
};

namespace detail {

inline constexpr std::array<const char*, 16> kNames{
    "Kgale",   "Tlokweng", "Mogoditshane", "Ramotswa", "Molepolole", "Thamaga",
    "Kanye",   "Lobatse",  "Mochudi",      "Gabane",   "Oodi",       "Modipane",
    "Kopong",  "Metsimotlhabe", "Tsolamosese", "Lentsweletau"};

inline std::string name_for(std::size_t i) {
  std::string n = kNames[i % kNames.size()];
  if (i >= kNames.size()) n += " " + std::to_string(i / kNames.size() + 1);
  return n;
}

// Ground-meter offset; Mercator distances shrink by cos(lat).
inline geo::GeoPoint offset(const geo::GeoPoint& p, double east_m, double north_m) {
  const double k = geo::mercator_scale(p.lat);
  const auto q = geo::project(p);
  return geo::unproject({q.x + east_m * k, q.y + north_m * k});
}

// L-shape in projected meters: the rectangle minus its north-east corner.
inline std::vector<geo::ProjectedPoint> outline(const geo::ProjectedPoint& o, double w, double h) {
  return {{o.x, o.y},
          {o.x + w, o.y},
          {o.x + w, o.y + 0.6 * h},
          {o.x + 0.55 * w, o.y + 0.6 * h},
          {o.x + 0.55 * w, o.y + h},
          {o.x, o.y + h}};
}

inline bool inside(const std::vector<geo::ProjectedPoint>& ring, const geo::ProjectedPoint& p) {
  bool in = false;
  for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
    const auto &a = ring[i], &b = ring[j];
    if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) in = !in;
  }
  return in;
}

inline std::string format_id(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03zu", prefix, i);
  return buf;
}

inline std::string coord(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace detail

inline Country make_country(const CountryConfig& cfg = {}) {
  cfg.validate();
  std::mt19937_64 rng(rng::mix(cfg.seed, 0xc0));
  auto unit = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  Country c;

  const auto mid = geo::project(cfg.center);
  const geo::ProjectedPoint o{mid.x - cfg.width_m / 2, mid.y - cfg.height_m / 2};
  const auto ring = detail::outline(o, cfg.width_m, cfg.height_m);
  geojson::Polygon poly;
  for (const auto& q : ring) poly.outer.push_back(geo::unproject(q));
  c.boundary.push_back(poly);

  // Raster covers the boundary plus a 300 m margin.
  auto& r = c.settlement;
  r.cell_size_m = cfg.cell_m;
  r.origin = {o.x - 300.0, o.y - 300.0};
  r.width = static_cast<int>(std::ceil((cfg.width_m + 600.0) / cfg.cell_m));
  r.height = static_cast<int>(std::ceil((cfg.height_m + 600.0) / cfg.cell_m));
  r.values.assign(static_cast<std::size_t>(r.width) * r.height, 0);
  struct Blob {
    geo::ProjectedPoint at;
    double radius;
    int code;
  };
  std::vector<Blob> blobs;
  while (static_cast<int>(blobs.size()) < cfg.clusters) {
    const geo::ProjectedPoint p{o.x + unit() * cfg.width_m, o.y + unit() * cfg.height_m};
    if (!detail::inside(ring, p)) continue;
    const int code = blobs.empty() ? 30 : (blobs.size() % 3 == 1 ? 13 : 12);
    blobs.push_back({p, 250.0 + 250.0 * unit(), code});
  }
  for (int row = 0; row < r.height; ++row)
    for (int col = 0; col < r.width; ++col) {
      const auto cc = r.cell_center(row, col);
      int v = unit() < 0.01 ? 11 : 0;
      for (const auto& b : blobs) {
        if (std::hypot(cc.x - b.at.x, cc.y - b.at.y) < b.radius) v = std::max(v, b.code);
      }
      r.values[static_cast<std::size_t>(row) * r.width + col] = v;
    }

  // Settled cells inside the boundary, in a seeded order.
  std::vector<geo::ProjectedPoint> settled;
  for (int row = 0; row < r.height; ++row)
    for (int col = 0; col < r.width; ++col) {
      const auto cc = r.cell_center(row, col);
      if (r.at(row, col) != 0 && detail::inside(ring, cc)) settled.push_back(cc);
    }
  for (std::size_t i = settled.size(); i > 1; --i) std::swap(settled[i - 1], settled[rng() % i]);

  auto far_from = [](const geo::GeoPoint& p, const std::vector<geo::GeoPoint>& others, double d) {
    for (const auto& q : others)
      if (geo::haversine_distance(p, q) < d) return false;
    return true;
  };
  std::vector<geo::GeoPoint> taken;
  std::size_t next = 0;
  auto draw_settled = [&](double spacing) -> std::optional<geo::GeoPoint> {
    for (; next < settled.size(); ++next) {
      const auto& cc = settled[next];
      const auto p = geo::unproject({cc.x + (unit() - 0.5) * 60.0, cc.y + (unit() - 0.5) * 60.0});
      if (far_from(p, taken, spacing)) {
        ++next;
        taken.push_back(p);
        return p;
      }
    }
    return std::nullopt;
  };
  for (int i = 0; i < cfg.schools; ++i) {
    const auto p = draw_settled(cfg.school_spacing_m);
    if (!p) break;
    c.schools.push_back({detail::format_id("S", static_cast<std::size_t>(i + 1)), *p, true});
  }
  if (static_cast<int>(c.schools.size()) < cfg.schools) {
    throw ConfigError("fixture settlement too small for " + std::to_string(cfg.schools) +
                      " schools at " + std::to_string(cfg.school_spacing_m) + " m spacing");
  }
  const std::size_t n = c.schools.size();
  for (std::size_t i = n - static_cast<std::size_t>(cfg.missing_from_government); i < n; ++i) {
    c.schools[i].in_government = false;
  }

  // Raw government list. Defects: a near-duplicate annex record, a
  // kindergarten, a record outside settlement, and an invalid coordinate.
  std::vector<json> gov;
  std::size_t gid = 0;
  auto add_gov = [&](const geo::GeoPoint& p, const std::string& name, const std::string& level) {
    gov.push_back(geojson::point_feature(
        p, {{"id", detail::format_id("GOV-", ++gid)}, {"name", name}, {"level", level}}));
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!c.schools[i].in_government) continue;
    const double a = 2.0 * std::numbers::pi * unit(), d = cfg.government_jitter_m * unit();
    add_gov(detail::offset(c.schools[i].location, d * std::cos(a), d * std::sin(a)),
            detail::name_for(i) + " Primary School", "primary");
  }
  add_gov(detail::offset(c.schools[0].location, 60.0, 0.0), detail::name_for(0) + " Primary School Annex",
          "primary");
  // Government-only records stay beyond match reach of any planted school.
  for (int i = 0; i < cfg.government_only; ++i) {
    const auto p = draw_settled(400.0);
    if (!p) throw ConfigError("fixture settlement too small for government-only records");
    add_gov(*p, detail::name_for(n + static_cast<std::size_t>(i)) + " Community School", "primary");
  }
  if (const auto p = draw_settled(200.0)) add_gov(*p, "Little Stars Kindergarten", "pre-primary");
  for (std::size_t tries = 0; tries < 10000; ++tries) {
    const geo::ProjectedPoint q{o.x + unit() * cfg.width_m, o.y + unit() * cfg.height_m};
    const auto cell = r.cell_of(q);
    if (!detail::inside(ring, q) || !cell) continue;
    bool empty = true;  // no settled cell within 400 m
    for (int dr = -4; dr <= 4 && empty; ++dr)
      for (int dc = -4; dc <= 4 && empty; ++dc) {
        const int rr = cell->first + dr, cc = cell->second + dc;
        if (rr >= 0 && cc >= 0 && rr < r.height && cc < r.width && r.at(rr, cc) != 0) empty = false;
      }
    if (empty) {
      add_gov(geo::unproject(q), "Remote Cattlepost School", "primary");
      break;
    }
  }
  {
    json f = geojson::point_feature({0.0, 0.0}, {{"id", detail::format_id("GOV-", ++gid)},
                                                {"name", "Unlocated Primary School"},
                                                {"level", "primary"}});
    f["geometry"]["coordinates"] = {cfg.center.lon, 123.0};
    gov.push_back(std::move(f));
  }
  c.government = geojson::feature_collection(std::move(gov));

  // OSM-style CSV: a duplicate of a government school, one school the
  // government list lacks, and non-school POIs.
  std::ostringstream osm;
  osm << "id,name,lat,lon,class\n";
  std::size_t oid = 0;
  auto add_osm = [&](const geo::GeoPoint& p, const std::string& name, const char* cls) {
    osm << detail::format_id("osm-", ++oid) << "," << csv::escape(name) << "," << detail::coord(p.lat) << ","
        << detail::coord(p.lon) << "," << cls << "\n";
  };
  add_osm(detail::offset(c.schools[std::min<std::size_t>(1, n - 1)].location, 0.0, 20.0),
          detail::name_for(1) + " School", "school");
  for (const auto& s : c.schools)
    if (!s.in_government) {
      add_osm(detail::offset(s.location, -10.0, 10.0), "Unlisted Primary School", "school");
      break;
    }
  for (int i = 0; i < 4; ++i) {
    if (const auto p = draw_settled(200.0)) add_osm(*p, i % 2 ? "Village Clinic" : "Market", "non_school");
  }
  c.osm_csv = osm.str();

  c.grid = nationwide::generate_tiles(c.boundary, cfg.tiling);
  c.imaged = nationwide::prefilter_tiles(c.grid, std::span<const RasterGrid>(&c.settlement, 1)).kept;
  return c;
}

// Pixel center of a planted motif inside `tile`, if any school falls within
// half a motif of the tile.
inline std::optional<std::array<int, 2>> motif_center(const Country& c, const geo::TileSpec& tile) {
  const double res = tile.size_m / tile.px;
  const int reach = synthetic::kMotifLong / 2;
  for (const auto& s : c.schools) {
    const auto q = geo::project(s.location);
    const int cx = static_cast<int>(std::lround((q.x - tile.min_corner.x) / res));
    const int cy = static_cast<int>(std::lround((tile.max_y() - q.y) / res));
    if (cx > -reach && cx < tile.px + reach && cy > -reach && cy < tile.px + reach) {
      return std::array<int, 2>{cx, cy};
    }
  }
  return std::nullopt;
}

inline Tensor render_tile(const Country& c, const nationwide::Tile& t, const CountryConfig& cfg) {
  const auto center = motif_center(c, t.spec);
  const auto seed = rng::mix(cfg.seed, 0x7113, (static_cast<std::uint64_t>(t.row) << 32) | unsigned(t.col));
  return synthetic::make_tile(seed, center ? 1 : 0, cfg.synth, center).image;
}

inline tileset::TileSet training_set(const CountryConfig& cfg) {
  const auto tiles = synthetic::make_dataset(cfg.train_tiles, rng::mix(cfg.seed, 0x7a1), cfg.synth);
  tileset::TileSet ts;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const auto s = i % 10 < 8 ? split::Split::train : i % 10 == 8 ? split::Split::val : split::Split::test;
    ts.entries.push_back({detail::format_id("t", i), tiles[i].label, s, tiles[i].cx, tiles[i].cy});
    ts.images.push_back(tiles[i].image);
  }
  return ts;
}

inline json truth_geojson(const Country& c) {
  std::vector<json> fs;
  for (const auto& s : c.schools) {
    fs.push_back(geojson::point_feature(s.location, {{"id", s.id}, {"in_government", s.in_government}}));
  }
  return geojson::feature_collection(std::move(fs));
}

inline Country write_country(const std::filesystem::path& dir, const CountryConfig& cfg = {}) {
  auto c = make_country(cfg);
  std::filesystem::create_directories(dir / "images");
  std::vector<json> polys;
  for (const auto& p : c.boundary) {
    polys.push_back({{"type", "Feature"},
                     {"geometry", geojson::polygon_geometry(p.outer)},
                     {"properties", {{"country", cfg.code}}}});
  }
  geojson::write_file((dir / "boundary.geojson").string(), geojson::feature_collection(std::move(polys)));
  {
    std::ofstream out(dir / "settlement.asc", std::ios::binary);
    write_ascii_grid(out, c.settlement);
    if (!out) throw DataError("cannot write settlement raster under '" + dir.string() + "'");
  }
  geojson::write_file((dir / "government.geojson").string(), c.government);
  {
    std::ofstream out(dir / "osm.csv", std::ios::binary);
    out << c.osm_csv;
    if (!out) throw DataError("cannot write osm.csv under '" + dir.string() + "'");
  }
  geojson::write_file((dir / "truth.geojson").string(), truth_geojson(c));
  for (const auto& t : c.imaged) {
    write_tensor(render_tile(c, t, cfg), (dir / "images" / (t.id + ".gten")).string());
  }
  tileset::write_tileset(dir / "train", training_set(cfg));
  return c;
}

}  // namespace schoolmap::fixture
