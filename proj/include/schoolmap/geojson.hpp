#pragma once

// GeoJSON (RFC 7946) helpers for point FeatureCollections and polygon
// boundaries.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "schoolmap/error.hpp"
#include "schoolmap/geo.hpp"

namespace schoolmap::geojson {

using json = nlohmann::json;

inline json read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path + ": invalid JSON: " + e.what());
  }
}

inline void write_file(const std::string& path, const json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << doc.dump(2) << "\n";
}

inline json point_feature(const geo::GeoPoint& p, json properties) {
  // RFC 7946 positions are [lon, lat].
  return json{{"type", "Feature"},
              {"geometry", {{"type", "Point"}, {"coordinates", {p.lon, p.lat}}}},
              {"properties", std::move(properties)}};
}

inline json feature_collection(std::vector<json> features) {
  return json{{"type", "FeatureCollection"}, {"features", std::move(features)}};
}

// A ring of projected or geographic vertices; first != last is allowed.
using Ring = std::vector<geo::GeoPoint>;

struct Polygon {
  Ring outer;
  std::vector<Ring> holes;
};

namespace detail {

inline Ring parse_ring(const json& coords) {
  Ring ring;
  for (const auto& pos : coords) {
    if (!pos.is_array() || pos.size() < 2 || !pos[0].is_number() || !pos[1].is_number()) {
      throw DataError("polygon ring position must be [lon, lat]");
    }
    ring.push_back({pos[1].get<double>(), pos[0].get<double>()});
  }
  if (ring.size() >= 2 && ring.front() == ring.back()) ring.pop_back();
  return ring;
}

inline Polygon parse_polygon(const json& coords) {
  if (!coords.is_array() || coords.empty()) throw DataError("empty polygon");
  Polygon p;
  p.outer = parse_ring(coords[0]);
  for (std::size_t i = 1; i < coords.size(); ++i) p.holes.push_back(parse_ring(coords[i]));
  return p;
}

inline void collect_polygons(const json& geometry, std::vector<Polygon>& out) {
  const std::string type = geometry.value("type", "");
  if (type == "Polygon") {
    out.push_back(parse_polygon(geometry.at("coordinates")));
  } else if (type == "MultiPolygon") {
    for (const auto& c : geometry.at("coordinates")) out.push_back(parse_polygon(c));
  } else {
    throw DataError("boundary geometry must be Polygon or MultiPolygon, got '" + type + "'");
  }
}

}  // namespace detail

// Accepts a bare geometry, a Feature, or a FeatureCollection of polygons.
inline std::vector<Polygon> parse_polygons(const json& doc) {
  std::vector<Polygon> out;
  const std::string type = doc.value("type", "");
  if (type == "FeatureCollection") {
    for (const auto& f : doc.at("features")) detail::collect_polygons(f.at("geometry"), out);
  } else if (type == "Feature") {
    detail::collect_polygons(doc.at("geometry"), out);
  } else {
    detail::collect_polygons(doc, out);
  }
  return out;
}

inline json polygon_geometry(const Ring& outer) {
  json ring = json::array();
  for (const auto& p : outer) ring.push_back({p.lon, p.lat});
  if (!outer.empty()) ring.push_back({outer.front().lon, outer.front().lat});
  return json{{"type", "Polygon"}, {"coordinates", json::array({ring})}};
}

}  // namespace schoolmap::geojson
