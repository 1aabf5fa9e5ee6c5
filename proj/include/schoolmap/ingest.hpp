#pragma once

// Dataset assembly: load POI points, drop non-primary/secondary schools by
// keyword, merge duplicates by buffer overlap, drop points with no nearby
// settlement, and top up negatives by sampling populated cells.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "schoolmap/cluster.hpp"
#include "schoolmap/csv.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/geo.hpp"
#include "schoolmap/geojson.hpp"
#include "schoolmap/raster.hpp"

namespace schoolmap::ingest {

using geojson::json;

enum class Source { government, osm, overture, sampled };
enum class ClassLabel { school, non_school };

inline std::string_view to_string(Source s) {
  switch (s) {
    case Source::government: return "government";
    case Source::osm: return "osm";
    case Source::overture: return "overture";
    case Source::sampled: return "sampled";
  }
  return "?";
}

inline Source parse_source(std::string_view s) {
  if (s == "government") return Source::government;
  if (s == "osm") return Source::osm;
  if (s == "overture") return Source::overture;
  if (s == "sampled") return Source::sampled;
  throw DataError("unknown source '" + std::string(s) + "'");
}

inline std::string_view to_string(ClassLabel c) {
  return c == ClassLabel::school ? "school" : "non_school";
}

inline ClassLabel parse_class(std::string_view s) {
  if (s == "school") return ClassLabel::school;
  if (s == "non_school") return ClassLabel::non_school;
  throw DataError("unknown class label '" + std::string(s) + "'");
}

// Lower is preferred when choosing a cluster representative.
inline int source_priority(Source s) { return static_cast<int>(s); }

struct PoiRecord {
  std::string id;
  std::string name;
  Source source = Source::government;
  ClassLabel class_label = ClassLabel::school;
  geo::GeoPoint location;
};

struct Reject {
  std::size_t row = 0;  // 1-based data row (CSV) or feature index (GeoJSON)
  std::string id;
  std::string reason;
};

struct LoadResult {
  std::vector<PoiRecord> records;
  std::vector<Reject> rejects;
};

struct Provenance {
  std::string country;
  std::vector<std::string> source_files;
  std::string pipeline_version = "1";
};

struct SchoolDataset {
  std::vector<PoiRecord> records;
  Provenance provenance;
};

namespace detail {

inline std::optional<double> parse_double(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// Empty string when the coordinate passes, otherwise a reject reason.
inline std::string check_coordinate(std::optional<double> lat, std::optional<double> lon) {
  if (!lat || !std::isfinite(*lat)) return "lat not numeric";
  if (!lon || !std::isfinite(*lon)) return "lon not numeric";
  if (*lat < -90.0 || *lat > 90.0) return "lat out of range";
  if (*lon < -180.0 || *lon > 180.0) return "lon out of range";
  return {};
}

inline void add_record(LoadResult& result, std::unordered_set<std::string>& seen,
                       PoiRecord rec, const std::string& path) {
  if (!seen.insert(rec.id).second) {
    throw DataError(path + ": duplicate id '" + rec.id + "'");
  }
  result.records.push_back(std::move(rec));
}

inline LoadResult load_csv(const std::string& path, Source source, ClassLabel default_class) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  csv::Row header;
  if (!csv::read_row(in, header)) throw DataError(path + ": empty CSV");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"id", "name", "lat", "lon"}) {
    if (!col.contains(need)) {
      throw DataError(path + ": CSV header must contain id,name,lat,lon (missing '" +
                      std::string(need) + "')");
    }
  }
  const auto class_col = col.find("class");
  LoadResult result;
  std::unordered_set<std::string> seen;
  csv::Row row;
  std::size_t line = 0;
  while (csv::read_row(in, row)) {
    ++line;
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != header.size()) {
      result.rejects.push_back({line, row.empty() ? "" : row[0], "wrong field count"});
      continue;
    }
    PoiRecord rec;
    rec.id = row[col["id"]];
    rec.name = row[col["name"]];
    rec.source = source;
    rec.class_label = default_class;
    if (rec.id.empty()) {
      result.rejects.push_back({line, "", "missing id"});
      continue;
    }
    const auto lat = parse_double(row[col["lat"]]);
    const auto lon = parse_double(row[col["lon"]]);
    if (auto reason = check_coordinate(lat, lon); !reason.empty()) {
      result.rejects.push_back({line, rec.id, reason});
      continue;
    }
    if (class_col != col.end() && !row[class_col->second].empty()) {
      try {
        rec.class_label = parse_class(row[class_col->second]);
      } catch (const DataError&) {
        result.rejects.push_back({line, rec.id, "unknown class label"});
        continue;
      }
    }
    rec.location = {*lat, *lon};
    add_record(result, seen, std::move(rec), path);
  }
  return result;
}

inline std::string json_id(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  return {};
}

inline LoadResult load_geojson(const std::string& path, Source source, ClassLabel default_class) {
  const json doc = geojson::read_file(path);
  if (doc.value("type", "") != "FeatureCollection" || !doc.contains("features")) {
    throw DataError(path + ": not a GeoJSON FeatureCollection");
  }
  LoadResult result;
  std::unordered_set<std::string> seen;
  std::size_t index = 0;
  for (const auto& f : doc["features"]) {
    ++index;
    const json props = f.contains("properties") && f["properties"].is_object()
                           ? f["properties"]
                           : json::object();
    std::string id = f.contains("id") ? json_id(f["id"]) : "";
    if (id.empty() && props.contains("id")) id = json_id(props["id"]);
    if (id.empty()) {
      result.rejects.push_back({index, "", "missing id"});
      continue;
    }
    const json geom = f.value("geometry", json());
    if (!geom.is_object() || geom.value("type", "") != "Point" || !geom.contains("coordinates") ||
        !geom["coordinates"].is_array() || geom["coordinates"].size() < 2) {
      result.rejects.push_back({index, id, "geometry is not a Point"});
      continue;
    }
    const auto& c = geom["coordinates"];
    std::optional<double> lon, lat;
    if (c[0].is_number()) lon = c[0].get<double>();
    if (c[1].is_number()) lat = c[1].get<double>();
    if (auto reason = check_coordinate(lat, lon); !reason.empty()) {
      result.rejects.push_back({index, id, reason});
      continue;
    }
    PoiRecord rec{id, props.value("name", std::string{}), source, default_class, {*lat, *lon}};
    if (props.contains("class") && props["class"].is_string()) {
      try {
        rec.class_label = parse_class(props["class"].get<std::string>());
      } catch (const DataError&) {
        result.rejects.push_back({index, id, "unknown class label"});
        continue;
      }
    }
    add_record(result, seen, std::move(rec), path);
  }
  return result;
}

}  // namespace detail

// GeoJSON FeatureCollection of Points (.geojson/.json) or CSV with an
// id,name,lat,lon header (.csv). An optional `class` column/property
// overrides `default_class`.
inline LoadResult load_points(const std::string& path, Source source,
                              ClassLabel default_class = ClassLabel::school) {
  std::string ext = std::filesystem::path(path).extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".geojson" || ext == ".json") return detail::load_geojson(path, source, default_class);
  if (ext == ".csv") return detail::load_csv(path, source, default_class);
  throw DataError(path + ": unknown point file format '" + ext + "'");
}

// ---------------------------------------------------------------------------
// Keyword exclusion

struct ExclusionRule {
  std::string category;
  std::string keyword;  // lower-case; may contain spaces
};

struct ExclusionRules {
  std::vector<ExclusionRule> rules;

  bool empty() const { return rules.empty(); }

  static ExclusionRules defaults() {
    ExclusionRules r;
    auto add = [&](const char* cat, std::initializer_list<const char*> kws) {
      for (const char* k : kws) r.rules.push_back({cat, k});
    };
    add("early_childhood", {"preschool", "pre-school", "pre school", "kindergarten", "nursery",
                            "daycare", "day care", "creche", "early childhood", "maternelle",
                            "jardin d'enfants"});
    add("tertiary", {"university", "universite", "college", "polytechnic", "faculty",
                     "institute of technology", "seminary"});
    add("sports", {"swimming", "taekwondo", "karate", "judo", "football academy",
                   "soccer academy", "sports academy", "golf", "tennis"});
    add("other", {"driving school", "auto-ecole", "language school", "music school",
                  "bible school", "computer training"});
    return r;
  }

  // One rule line per category: `category: keyword, keyword, ...`.
  // Lines starting with '#' are ignored.
  static ExclusionRules parse(std::istream& in) {
    ExclusionRules r;
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      const auto colon = line.find(':');
      if (colon == std::string::npos) throw ConfigError("exclusion rule line lacks ':': " + line);
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
      };
      const std::string cat = trim(line.substr(0, colon));
      std::string rest = line.substr(colon + 1);
      std::size_t start = 0;
      while (start <= rest.size()) {
        auto comma = rest.find(',', start);
        if (comma == std::string::npos) comma = rest.size();
        std::string kw = trim(rest.substr(start, comma - start));
        for (auto& c : kw) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        if (!kw.empty()) r.rules.push_back({cat, kw});
        start = comma + 1;
      }
    }
    if (r.empty()) throw ConfigError("exclusion rules file defines no keywords");
    return r;
  }
};

struct ExcludedRecord {
  PoiRecord record;
  std::string keyword;
  std::string category;
};

struct KeywordFilterResult {
  std::vector<PoiRecord> kept;
  std::vector<ExcludedRecord> excluded;
};

namespace detail {

// Bytes >= 0x80 count as word characters so UTF-8 letters never form a boundary.
inline bool is_word_byte(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u >= 0x80 || std::isalnum(u);
}

inline bool contains_word(std::string_view text, std::string_view word) {
  if (word.empty()) return false;
  for (std::size_t pos = text.find(word); pos != std::string_view::npos;
       pos = text.find(word, pos + 1)) {
    const bool left_ok = pos == 0 || !is_word_byte(text[pos - 1]);
    const std::size_t end = pos + word.size();
    const bool right_ok = end == text.size() || !is_word_byte(text[end]);
    if (left_ok && right_ok) return true;
  }
  return false;
}

}  // namespace detail

inline KeywordFilterResult filter_keywords(std::span<const PoiRecord> records,
                                           const ExclusionRules& rules) {
  if (rules.empty()) throw ConfigError("exclusion rules must not be empty");
  KeywordFilterResult out;
  for (const auto& rec : records) {
    std::string lower = rec.name;
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    const ExclusionRule* hit = nullptr;
    for (const auto& rule : rules.rules) {
      if (detail::contains_word(lower, rule.keyword)) {
        hit = &rule;
        break;
      }
    }
    if (hit) out.excluded.push_back({rec, hit->keyword, hit->category});
    else out.kept.push_back(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Deduplication

inline bool preferred_representative(const PoiRecord& a, const PoiRecord& b) {
  const int pa = source_priority(a.source), pb = source_priority(b.source);
  return pa < pb || (pa == pb && a.id < b.id);
}

// One representative per buffer-overlap component; representatives keep
// their input order.
inline std::vector<PoiRecord> dedup_cluster(std::span<const PoiRecord> points,
                                            double buffer_r_m = 150.0) {
  std::vector<geo::GeoPoint> locs;
  locs.reserve(points.size());
  for (const auto& p : points) locs.push_back(p.location);
  const auto labels = overlap_components(locs, buffer_r_m);
  std::vector<std::size_t> reps;
  for (const auto& group : group_components(labels)) {
    std::size_t best = group.front();
    for (std::size_t i : group) {
      if (preferred_representative(points[i], points[best])) best = i;
    }
    reps.push_back(best);
  }
  std::sort(reps.begin(), reps.end());
  std::vector<PoiRecord> out;
  out.reserve(reps.size());
  for (std::size_t i : reps) out.push_back(points[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Settlement filtering

// Number of nonzero cells whose centers lie within radius_m (haversine) of
// p, or nullopt if the raster does not cover p.
inline std::optional<std::size_t> count_settlement_cells(const RasterGrid& raster,
                                                         const geo::GeoPoint& p,
                                                         double radius_m) {
  const auto q = geo::project(p);
  if (!raster.covers(q)) return std::nullopt;
  // Projected distances exceed ground distances by sec(lat); widen the
  // window accordingly, then test exactly.
  const double half = radius_m * geo::mercator_scale(std::min(std::abs(p.lat) + 0.1, 85.0)) +
                      raster.cell_size_m;
  const double cs = raster.cell_size_m;
  const int c0 = std::max(0, static_cast<int>(std::floor((q.x - half - raster.min_x()) / cs)));
  const int c1 = std::min(raster.width - 1,
                          static_cast<int>(std::floor((q.x + half - raster.min_x()) / cs)));
  const int r0 = std::max(0, static_cast<int>(std::floor((raster.max_y() - (q.y + half)) / cs)));
  const int r1 = std::min(raster.height - 1,
                          static_cast<int>(std::floor((raster.max_y() - (q.y - half)) / cs)));
  std::size_t count = 0;
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      if (raster.at(r, c) == 0) continue;
      const auto center = geo::unproject(raster.cell_center(r, c));
      if (geo::haversine_distance(center, p) <= radius_m) ++count;
    }
  }
  return count;
}

struct DroppedRecord {
  PoiRecord record;
  std::string reason;  // "no settlement" or "no coverage"
};

struct SettlementFilterResult {
  std::vector<PoiRecord> kept;
  std::vector<DroppedRecord> dropped;
};

inline SettlementFilterResult settlement_filter(std::span<const PoiRecord> points,
                                                std::span<const RasterGrid> rasters,
                                                double buffer_m = 150.0) {
  if (rasters.empty()) throw ConfigError("settlement filter needs at least one raster");
  SettlementFilterResult out;
  for (const auto& p : points) {
    bool covered = false;
    bool populated = false;
    for (const auto& raster : rasters) {
      const auto n = count_settlement_cells(raster, p.location, buffer_m);
      if (!n) continue;
      covered = true;
      if (*n > 0) {
        populated = true;
        break;
      }
    }
    if (populated) out.kept.push_back(p);
    else out.dropped.push_back({p, covered ? "no settlement" : "no coverage"});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Negative sampling

struct NegativeSamplingConfig {
  double ratio = 2.0;
  double min_spacing_m = 300.0;
  double min_school_dist_m = 300.0;
  std::uint64_t seed = 0;
  std::string id_prefix = "neg-";
};

struct SamplingWarning {
  std::size_t requested = 0;
  std::size_t produced = 0;
  std::string reason;
};

struct SampleResult {
  std::vector<PoiRecord> negatives;
  std::optional<SamplingWarning> warning;
};

namespace detail {

// Uniform-grid spatial hash over projected coordinates. A neighbor query
// scans the 3x3 block around the query cell, exact for distances up to the
// cell size in projected meters.
class PointHash {
 public:
  explicit PointHash(double cell_m) : cell_(cell_m) {}

  void insert(const geo::GeoPoint& p) {
    const auto q = geo::project(p);
    buckets_[key(cell_index(q.x), cell_index(q.y))].push_back(p);
  }

  // True iff some stored point lies strictly closer than dist_m.
  bool any_closer(const geo::GeoPoint& p, double dist_m) const {
    const auto q = geo::project(p);
    const long long cx = cell_index(q.x), cy = cell_index(q.y);
    for (long long dx = -1; dx <= 1; ++dx) {
      for (long long dy = -1; dy <= 1; ++dy) {
        const auto it = buckets_.find(key(cx + dx, cy + dy));
        if (it == buckets_.end()) continue;
        for (const auto& o : it->second) {
          if (geo::haversine_distance(o, p) < dist_m) return true;
        }
      }
    }
    return false;
  }

 private:
  long long cell_index(double v) const { return static_cast<long long>(std::floor(v / cell_)); }
  static std::uint64_t key(long long x, long long y) {
    return (static_cast<std::uint64_t>(x) << 32) ^ (static_cast<std::uint64_t>(y) & 0xffffffffULL);
  }

  double cell_;
  std::unordered_map<std::uint64_t, std::vector<geo::GeoPoint>> buckets_;
};

inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Fisher-Yates with an explicit bounded draw, so the permutation does not
// depend on the standard library's distribution implementation.
template <typename T>
void seeded_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace detail

// Samples non-school points from nonzero settlement cells (jittered
// uniformly inside the cell) until round(ratio * |schools|) negatives exist,
// counting `existing_negatives` toward the target and the spacing rules.
inline SampleResult sample_negatives(std::span<const RasterGrid> rasters,
                                     std::span<const PoiRecord> schools,
                                     const NegativeSamplingConfig& cfg,
                                     std::span<const PoiRecord> existing_negatives = {}) {
  const std::size_t target_total =
      static_cast<std::size_t>(std::llround(cfg.ratio * static_cast<double>(schools.size())));
  SampleResult out;
  if (target_total <= existing_negatives.size()) return out;
  const std::size_t needed = target_total - existing_negatives.size();

  struct Candidate {
    std::size_t raster;
    int row, col;
  };
  std::vector<Candidate> candidates;
  double max_abs_lat = 0.0;
  auto track_lat = [&](double lat) { max_abs_lat = std::max(max_abs_lat, std::abs(lat)); };
  for (std::size_t ri = 0; ri < rasters.size(); ++ri) {
    const auto& g = rasters[ri];
    track_lat(geo::unproject({g.min_x(), g.min_y()}).lat);
    track_lat(geo::unproject({g.min_x(), g.max_y()}).lat);
    for (int r = 0; r < g.height; ++r)
      for (int c = 0; c < g.width; ++c)
        if (g.at(r, c) != 0) candidates.push_back({ri, r, c});
  }
  for (const auto& s : schools) track_lat(s.location.lat);
  for (const auto& s : existing_negatives) track_lat(s.location.lat);

  const double reach = std::max(cfg.min_spacing_m, cfg.min_school_dist_m);
  const double cell = reach * geo::mercator_scale(std::min(max_abs_lat + 0.5, 85.0)) + 1.0;
  detail::PointHash school_hash(cell), negative_hash(cell);
  for (const auto& s : schools) school_hash.insert(s.location);
  for (const auto& n : existing_negatives) negative_hash.insert(n.location);

  std::mt19937_64 rng(cfg.seed);
  detail::seeded_shuffle(candidates, rng);
  for (const auto& cand : candidates) {
    if (out.negatives.size() == needed) break;
    const auto& g = rasters[cand.raster];
    const auto center = g.cell_center(cand.row, cand.col);
    const double jx = (detail::unit_uniform(rng) - 0.5) * g.cell_size_m;
    const double jy = (detail::unit_uniform(rng) - 0.5) * g.cell_size_m;
    const auto p = geo::unproject({center.x + jx, center.y + jy});
    if (school_hash.any_closer(p, cfg.min_school_dist_m)) continue;
    if (negative_hash.any_closer(p, cfg.min_spacing_m)) continue;
    negative_hash.insert(p);
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06zu", out.negatives.size() + 1);
    out.negatives.push_back(
        {cfg.id_prefix + buf, "", Source::sampled, ClassLabel::non_school, p});
  }
  if (out.negatives.size() < needed) {
    out.warning = SamplingWarning{needed, out.negatives.size(),
                                  "populated area too small for the requested spacing"};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline json record_properties(const PoiRecord& r) {
  return json{{"id", r.id},
              {"name", r.name},
              {"source", to_string(r.source)},
              {"class", to_string(r.class_label)}};
}

inline json dataset_to_geojson(const SchoolDataset& ds) {
  std::vector<json> features;
  features.reserve(ds.records.size());
  for (const auto& r : ds.records) {
    features.push_back(geojson::point_feature(r.location, record_properties(r)));
  }
  json fc = geojson::feature_collection(std::move(features));
  fc["provenance"] = {{"country", ds.provenance.country},
                      {"source_files", ds.provenance.source_files},
                      {"pipeline_version", ds.provenance.pipeline_version}};
  return fc;
}

// Reads a dataset written by dataset_to_geojson (source/class properties).
inline SchoolDataset dataset_from_geojson(const json& doc) {
  SchoolDataset ds;
  if (doc.contains("provenance")) {
    const auto& p = doc["provenance"];
    ds.provenance.country = p.value("country", "");
    ds.provenance.source_files = p.value("source_files", std::vector<std::string>{});
    ds.provenance.pipeline_version = p.value("pipeline_version", "1");
  }
  std::unordered_set<std::string> seen;
  for (const auto& f : doc.at("features")) {
    const auto& props = f.at("properties");
    const auto& c = f.at("geometry").at("coordinates");
    PoiRecord r{props.at("id").get<std::string>(), props.value("name", ""),
                parse_source(props.value("source", "government")),
                parse_class(props.value("class", "school")),
                {c.at(1).get<double>(), c.at(0).get<double>()}};
    if (!geo::is_valid(r.location)) throw DataError("invalid location for id '" + r.id + "'");
    if (!seen.insert(r.id).second) throw DataError("duplicate id '" + r.id + "'");
    ds.records.push_back(std::move(r));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Full cleaning chain

struct PointSource {
  std::string path;
  Source source;
  ClassLabel default_class = ClassLabel::school;
};

struct IngestConfig {
  std::string country;
  double dedup_buffer_m = 150.0;
  double settlement_buffer_m = 150.0;
  NegativeSamplingConfig negatives;
  ExclusionRules rules = ExclusionRules::defaults();
};

struct IngestResult {
  SchoolDataset dataset;
  json audit;
  std::optional<SamplingWarning> warning;
};

inline json rejects_json(const std::string& path, const std::vector<Reject>& rejects) {
  json arr = json::array();
  for (const auto& r : rejects) {
    arr.push_back({{"file", path}, {"row", r.row}, {"id", r.id}, {"reason", r.reason}});
  }
  return arr;
}

inline IngestResult run_ingest(std::span<const PointSource> inputs,
                               std::span<const RasterGrid> settlement,
                               const IngestConfig& cfg) {
  IngestResult result;
  json audit;
  json rejects = json::array();
  std::vector<PoiRecord> schools, non_schools;
  std::unordered_set<std::string> ids;
  for (const auto& in : inputs) {
    auto loaded = load_points(in.path, in.source, in.default_class);
    for (auto& r : rejects_json(in.path, loaded.rejects)) rejects.push_back(std::move(r));
    audit["loaded"][in.path] = loaded.records.size();
    for (auto& rec : loaded.records) {
      // Ids only need to be unique per file; namespace them by source on collision.
      if (!ids.insert(rec.id).second) {
        rec.id = std::string(to_string(rec.source)) + ":" + rec.id;
        if (!ids.insert(rec.id).second) throw DataError("duplicate id '" + rec.id + "'");
      }
      (rec.class_label == ClassLabel::school ? schools : non_schools).push_back(std::move(rec));
    }
    result.dataset.provenance.source_files.push_back(in.path);
  }
  audit["rejects"] = rejects;
  audit["counts"]["schools_loaded"] = schools.size();
  audit["counts"]["non_schools_loaded"] = non_schools.size();

  auto kw = filter_keywords(schools, cfg.rules);
  json excluded = json::array();
  for (const auto& e : kw.excluded) {
    excluded.push_back({{"id", e.record.id}, {"name", e.record.name},
                        {"keyword", e.keyword}, {"category", e.category}});
  }
  audit["keyword_excluded"] = excluded;
  audit["counts"]["schools_after_keywords"] = kw.kept.size();

  auto school_reps = dedup_cluster(kw.kept, cfg.dedup_buffer_m);
  audit["counts"]["schools_after_dedup"] = school_reps.size();
  auto school_settle = settlement_filter(school_reps, settlement, cfg.settlement_buffer_m);
  audit["counts"]["schools_after_settlement"] = school_settle.kept.size();

  auto neg_reps = dedup_cluster(non_schools, cfg.dedup_buffer_m);
  auto neg_settle = settlement_filter(neg_reps, settlement, cfg.settlement_buffer_m);
  std::vector<PoiRecord> poi_negatives;
  {
    double max_lat = 0.0;
    for (const auto& s : school_settle.kept) max_lat = std::max(max_lat, std::abs(s.location.lat));
    for (const auto& s : neg_settle.kept) max_lat = std::max(max_lat, std::abs(s.location.lat));
    detail::PointHash school_hash(
        cfg.negatives.min_school_dist_m * geo::mercator_scale(std::min(max_lat + 0.5, 85.0)) + 1.0);
    for (const auto& s : school_settle.kept) school_hash.insert(s.location);
    for (const auto& n : neg_settle.kept) {
      if (!school_hash.any_closer(n.location, cfg.negatives.min_school_dist_m)) {
        poi_negatives.push_back(n);
      }
    }
  }
  const std::size_t target =
      static_cast<std::size_t>(std::llround(cfg.negatives.ratio * school_settle.kept.size()));
  if (poi_negatives.size() > target) {
    std::mt19937_64 rng(cfg.negatives.seed ^ 0x9e3779b97f4a7c15ULL);
    detail::seeded_shuffle(poi_negatives, rng);
    poi_negatives.resize(target);
    std::sort(poi_negatives.begin(), poi_negatives.end(),
              [](const PoiRecord& a, const PoiRecord& b) { return a.id < b.id; });
  }
  audit["counts"]["poi_negatives"] = poi_negatives.size();

  auto sampled = sample_negatives(settlement, school_settle.kept, cfg.negatives, poi_negatives);
  audit["counts"]["sampled_negatives"] = sampled.negatives.size();
  if (sampled.warning) {
    audit["warnings"].push_back({{"stage", "sample_negatives"},
                                 {"requested", sampled.warning->requested},
                                 {"produced", sampled.warning->produced},
                                 {"reason", sampled.warning->reason}});
  }
  json dropped = json::array();
  for (const auto* list : {&school_settle.dropped, &neg_settle.dropped}) {
    for (const auto& d : *list) dropped.push_back({{"id", d.record.id}, {"reason", d.reason}});
  }
  audit["settlement_dropped"] = dropped;

  auto& records = result.dataset.records;
  records = school_settle.kept;
  records.insert(records.end(), poi_negatives.begin(), poi_negatives.end());
  records.insert(records.end(), sampled.negatives.begin(), sampled.negatives.end());
  audit["counts"]["final_schools"] = school_settle.kept.size();
  audit["counts"]["final_non_schools"] = poi_negatives.size() + sampled.negatives.size();
  audit["country"] = cfg.country;
  result.dataset.provenance.country = cfg.country;
  result.audit = std::move(audit);
  result.warning = sampled.warning;
  return result;
}

}  // namespace schoolmap::ingest
