#pragma once

// Urban/rural strata from a GHSL-SMOD L2 raster and stratified
// train/val/test splits with largest-remainder apportionment.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "schoolmap/cluster.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/ingest.hpp"
#include "schoolmap/raster.hpp"

namespace schoolmap::split {

using ingest::ClassLabel;
using ingest::PoiRecord;

enum class Stratum { urban, rural };
enum class Split { train, val, test };

inline std::string_view to_string(Stratum s) { return s == Stratum::urban ? "urban" : "rural"; }
inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + std::string(s) + "'");
}

// GHSL-SMOD L2 legend: 30 urban centre, 23 dense urban, 22 semi-dense urban,
// 21 suburban/peri-urban form the urban domain; 13 rural cluster, 12 low
// density, 11 very low density, and 10 (water) or below are rural.
inline Stratum stratum_from_smod_code(int code) {
  switch (code) {
    case 30: case 23: case 22: case 21: return Stratum::urban;
    case 13: case 12: case 11: return Stratum::rural;
    default:
      if (code <= 10) return Stratum::rural;
      throw DataError("unknown SMOD code " + std::to_string(code));
  }
}

// Containing-cell lookup.
inline Stratum assign_stratum(const PoiRecord& point, const RasterGrid& smod) {
  const auto cell = smod.cell_of(geo::project(point.location));
  if (!cell) throw DataError("SMOD raster does not cover point '" + point.id + "'");
  return stratum_from_smod_code(smod.at(cell->first, cell->second));
}

struct Fractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

// Largest-remainder apportionment of n items; ties in the remainder go to
// the earlier split (train, then val, then test).
inline std::array<std::size_t, 3> apportion(std::size_t n, const Fractions& f) {
  const std::array<double, 3> fr{f.train, f.val, f.test};
  const double total = fr[0] + fr[1] + fr[2];
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t assigned = 0;
  for (int i = 0; i < 3; ++i) {
    // Round the quota to 12 significant digits so 7 * 0.1 and 7 * 0.8
    // carry their exact decimal remainders.
    const double quota = std::round(n * fr[i] / total * 1e9) / 1e9;
    counts[i] = static_cast<std::size_t>(std::floor(quota));
    rem[i] = quota - counts[i];
    assigned += counts[i];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++counts[order[k % 3]];
  return counts;
}

struct LabeledRecord {
  PoiRecord record;
  Stratum stratum = Stratum::rural;
};

struct SplitAssignment {
  std::map<std::string, Split> by_id;

  Split at(const std::string& id) const {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("no split assignment for id '" + id + "'");
    return it->second;
  }
};

struct SpacingViolation {
  std::string a, b;
  double distance_m = 0.0;
};

inline std::vector<SpacingViolation> spacing_violations(std::span<const LabeledRecord> records,
                                                        double min_spacing_m) {
  std::vector<geo::GeoPoint> pts;
  pts.reserve(records.size());
  for (const auto& r : records) pts.push_back(r.record.location);
  std::vector<SpacingViolation> out;
  for_each_close_pair(pts, min_spacing_m, [&](std::size_t i, std::size_t j) {
    out.push_back({records[i].record.id, records[j].record.id,
                   geo::haversine_distance(pts[i], pts[j])});
  });
  return out;
}

inline std::size_t stratum_index(ClassLabel c, Stratum s) {
  return (c == ClassLabel::school ? 0 : 2) + (s == Stratum::urban ? 0 : 1);
}

// Stratified by class x urban/rural. Within a stratum, records are ordered by
// id, shuffled with a seed derived from (seed, stratum), then cut by the
// apportioned counts.
inline SplitAssignment stratified_split(std::span<const LabeledRecord> records,
                                        const Fractions& fractions, std::uint64_t seed,
                                        double min_spacing_m = 300.0) {
  if (const auto bad = spacing_violations(records, min_spacing_m); !bad.empty()) {
    std::string msg = "records closer than " + std::to_string(min_spacing_m) + " m:";
    for (std::size_t i = 0; i < std::min<std::size_t>(bad.size(), 20); ++i) {
      msg += " (" + bad[i].a + ", " + bad[i].b + ", " + std::to_string(bad[i].distance_m) + " m)";
    }
    if (bad.size() > 20) msg += " ... " + std::to_string(bad.size()) + " pairs total";
    throw DataError(msg);
  }
  std::array<std::vector<std::string>, 4> strata;
  for (const auto& r : records) {
    strata[stratum_index(r.record.class_label, r.stratum)].push_back(r.record.id);
  }
  SplitAssignment out;
  for (std::size_t s = 0; s < strata.size(); ++s) {
    auto& ids = strata[s];
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + s + 1);
    ingest::detail::seeded_shuffle(ids, rng);
    const auto counts = apportion(ids.size(), fractions);
    std::size_t i = 0;
    for (int k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < counts[k]; ++c, ++i) {
        out.by_id.emplace(ids[i], static_cast<Split>(k));
      }
    }
  }
  return out;
}

inline void write_split_csv(std::ostream& out, const SplitAssignment& a) {
  out << "id,split\n";
  for (const auto& [id, s] : a.by_id) out << csv::escape(id) << "," << to_string(s) << "\n";
}

inline SplitAssignment read_split_csv(std::istream& in) {
  SplitAssignment a;
  csv::Row row;
  if (!csv::read_row(in, row) || row.size() < 2 || row[0] != "id" || row[1] != "split") {
    throw DataError("split CSV must start with header id,split");
  }
  while (csv::read_row(in, row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != 2) throw DataError("split CSV row must have 2 fields");
    a.by_id[row[0]] = parse_split(row[1]);
  }
  return a;
}

// Table-1 style counts: class x stratum x split.
inline nlohmann::json strata_report(std::span<const LabeledRecord> records,
                                    const SplitAssignment& a) {
  nlohmann::json rep;
  for (const char* c : {"school", "non_school"})
    for (const char* s : {"urban", "rural"})
      for (const char* k : {"train", "val", "test", "total"}) rep[c][s][k] = 0;
  for (const auto& r : records) {
    auto& cell = rep[std::string(ingest::to_string(r.record.class_label))]
                    [std::string(to_string(r.stratum))];
    cell[std::string(to_string(a.at(r.record.id)))] =
        cell[std::string(to_string(a.at(r.record.id)))].get<int>() + 1;
    cell["total"] = cell["total"].get<int>() + 1;
  }
  rep["total"] = records.size();
  return rep;
}

}  // namespace schoolmap::split
