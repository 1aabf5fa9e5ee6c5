#include <algorithm>
#include <functional>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "schoolmap/ingest.hpp"
#include "test_util.hpp"

using namespace schoolmap;
using namespace schoolmap::ingest;
using schoolmap::testing::offset_m;
using schoolmap::testing::TempDir;

namespace {

const geo::GeoPoint kDakar{14.70, -17.45};

PoiRecord rec(std::string id, geo::GeoPoint p, Source s = Source::government,
              ClassLabel c = ClassLabel::school, std::string name = "") {
  return {std::move(id), std::move(name), s, c, p};
}

// Raster of 10 m cells centred on `center`, `half_cells` cells each way.
RasterGrid blank_raster(const geo::GeoPoint& center, int half_cells, double cell = 10.0) {
  const auto q = geo::project(center);
  RasterGrid g;
  g.cell_size_m = cell;
  g.width = g.height = 2 * half_cells;
  g.origin = {q.x - half_cells * cell, q.y - half_cells * cell};
  g.values.assign(static_cast<std::size_t>(g.width) * g.height, 0);
  return g;
}

void set_cell_at(RasterGrid& g, const geo::GeoPoint& p, int v = 1) {
  const auto rc = g.cell_of(geo::project(p));
  ASSERT_TRUE(rc.has_value());
  g.values[static_cast<std::size_t>(rc->first) * g.width + rc->second] = v;
}

// Independent component oracle: all-pairs adjacency + iterative DFS.
std::vector<std::size_t> dfs_components(const std::vector<geo::GeoPoint>& pts, double r) {
  const std::size_t n = pts.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (geo::haversine_distance(pts[i], pts[j]) < 2 * r) {
        adj[i].push_back(j);
        adj[j].push_back(i);
      }
  std::vector<std::size_t> label(n, n);
  for (std::size_t s = 0; s < n; ++s) {
    if (label[s] != n) continue;
    std::vector<std::size_t> stack{s};
    label[s] = s;
    while (!stack.empty()) {
      const auto u = stack.back();
      stack.pop_back();
      for (auto v : adj[u])
        if (label[v] == n) {
          label[v] = s;
          stack.push_back(v);
        }
    }
  }
  return label;
}

double min_pairwise(const std::vector<PoiRecord>& rs) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = i + 1; j < rs.size(); ++j)
      m = std::min(m, geo::haversine_distance(rs[i].location, rs[j].location));
  return m;
}

}  // namespace

TEST(LoadPoints, GeoJsonThreeValidPoints) {
  TempDir dir;
  const auto path = dir.write("pts.geojson", R"({"type":"FeatureCollection","features":[
    {"type":"Feature","id":"a","geometry":{"type":"Point","coordinates":[-17.4,14.7]},"properties":{"name":"A"}},
    {"type":"Feature","geometry":{"type":"Point","coordinates":[-17.5,14.8]},"properties":{"id":"b","name":"B"}},
    {"type":"Feature","id":3,"geometry":{"type":"Point","coordinates":[-17.6,14.9]},"properties":{}}]})");
  const auto r = load_points(path, Source::osm);
  ASSERT_EQ(r.records.size(), 3u);
  EXPECT_TRUE(r.rejects.empty());
  EXPECT_EQ(r.records[0].id, "a");
  EXPECT_EQ(r.records[1].id, "b");
  EXPECT_EQ(r.records[2].id, "3");
  EXPECT_DOUBLE_EQ(r.records[0].location.lat, 14.7);
  EXPECT_DOUBLE_EQ(r.records[0].location.lon, -17.4);
  EXPECT_EQ(r.records[0].source, Source::osm);
}

TEST(LoadPoints, CsvLatitudeOutOfRangeIsRejected) {
  TempDir dir;
  const auto path = dir.write("pts.csv",
                              "id,name,lat,lon\n"
                              "s1,Ecole A,14.7,-17.4\n"
                              "s2,\"Ecole, B\",91,-17.4\n"
                              "s3,Ecole C,abc,-17.4\n");
  const auto r = load_points(path, Source::government);
  ASSERT_EQ(r.records.size(), 1u);
  ASSERT_EQ(r.rejects.size(), 2u);
  EXPECT_EQ(r.rejects[0].id, "s2");
  EXPECT_EQ(r.rejects[0].reason, "lat out of range");
  EXPECT_EQ(r.rejects[0].row, 2u);
  EXPECT_EQ(r.rejects[1].reason, "lat not numeric");
}

TEST(LoadPoints, DuplicateIdNamesTheId) {
  TempDir dir;
  const auto path = dir.write("pts.csv", "id,name,lat,lon\nx7,A,1,1\nx7,B,2,2\n");
  try {
    load_points(path, Source::government);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("x7"), std::string::npos);
  }
}

TEST(LoadPoints, UnknownFormatAndMissingFile) {
  TempDir dir;
  EXPECT_THROW(load_points(dir.write("pts.txt", "x"), Source::osm), DataError);
  EXPECT_THROW(load_points(dir.file("missing.csv"), Source::osm), DataError);
}

TEST(FilterKeywords, ExcludesNonK12Names) {
  const std::vector<PoiRecord> rs{rec("1", kDakar, Source::osm, ClassLabel::school, "Dakar Primary School"),
                                  rec("2", kDakar, Source::osm, ClassLabel::school, "Sunshine Kindergarten"),
                                  rec("3", kDakar, Source::osm, ClassLabel::school, "University of Ghana")};
  const auto r = filter_keywords(rs, ExclusionRules::defaults());
  ASSERT_EQ(r.kept.size(), 1u);
  EXPECT_EQ(r.kept[0].id, "1");
  ASSERT_EQ(r.excluded.size(), 2u);
  EXPECT_EQ(r.excluded[0].keyword, "kindergarten");
  EXPECT_EQ(r.excluded[0].category, "early_childhood");
  EXPECT_EQ(r.excluded[1].keyword, "university");
}

TEST(FilterKeywords, WordBoundaryAndCase) {
  ExclusionRules rules;
  rules.rules = {{"sports", "golf"}, {"other", "driving school"}};
  const std::vector<PoiRecord> rs{rec("1", kDakar, Source::osm, ClassLabel::school, "Golfview Secondary"),
                                  rec("2", kDakar, Source::osm, ClassLabel::school, "GOLF club school"),
                                  rec("3", kDakar, Source::osm, ClassLabel::school, "Ace Driving-School"),
                                  rec("4", kDakar, Source::osm, ClassLabel::school, "Ace (driving school)")};
  const auto r = filter_keywords(rs, rules);
  ASSERT_EQ(r.kept.size(), 2u);
  EXPECT_EQ(r.kept[0].id, "1");
  EXPECT_EQ(r.kept[1].id, "3");
  EXPECT_THROW(filter_keywords(rs, ExclusionRules{}), ConfigError);
}

TEST(FilterKeywords, ParseRulesFile) {
  std::istringstream in("# comment\nearly: Creche, nursery\nsports: chess club\n");
  const auto rules = ExclusionRules::parse(in);
  ASSERT_EQ(rules.rules.size(), 3u);
  EXPECT_EQ(rules.rules[0].keyword, "creche");
  EXPECT_EQ(rules.rules[2].keyword, "chess club");
}

TEST(Dedup, SinglePointIsItself) {
  const std::vector<PoiRecord> rs{rec("a", kDakar)};
  const auto out = dedup_cluster(rs);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].id, "a");
}

TEST(Dedup, GovernmentPreferredOverOsm) {
  const std::vector<PoiRecord> rs{rec("osm-1", kDakar, Source::osm),
                                  rec("gov-9", offset_m(kDakar, 100, 0), Source::government)};
  const auto out = dedup_cluster(rs, 150.0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].id, "gov-9");
}

TEST(Dedup, ChainMergesTransitively) {
  std::vector<PoiRecord> rs;
  for (int i = 0; i < 4; ++i) rs.push_back(rec("p" + std::to_string(i), offset_m(kDakar, 200.0 * i, 0)));
  EXPECT_GT(geo::haversine_distance(rs.front().location, rs.back().location), 599.0);
  const auto out = dedup_cluster(rs, 150.0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].id, "p0");
}

TEST(Dedup, TieBrokenByLexicographicId) {
  const std::vector<PoiRecord> rs{rec("b", kDakar, Source::osm), rec("a", offset_m(kDakar, 50, 0), Source::osm),
                                  rec("c", offset_m(kDakar, 80, 0), Source::overture)};
  const auto out = dedup_cluster(rs, 150.0);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].id, "a");
}

TEST(Dedup, MatchesComponentOracleAndIsIdempotent) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 3000.0);
  const Source sources[] = {Source::government, Source::osm, Source::overture};
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<PoiRecord> rs;
    std::vector<geo::GeoPoint> pts;
    for (int i = 0; i < 200; ++i) {
      const auto p = offset_m(kDakar, u(rng), u(rng));
      rs.push_back(rec("id" + std::to_string(rng() % 100000) + "_" + std::to_string(i), p, sources[rng() % 3]));
      pts.push_back(p);
    }
    const auto oracle = dfs_components(pts, 150.0);
    const auto labels = overlap_components(pts, 150.0);
    // Same partition: i~j in oracle iff i~j in implementation.
    for (std::size_t i = 0; i < pts.size(); ++i)
      for (std::size_t j = i + 1; j < pts.size(); ++j)
        ASSERT_EQ(oracle[i] == oracle[j], labels[i] == labels[j]);

    const auto once = dedup_cluster(rs, 150.0);
    std::set<std::size_t> comps(oracle.begin(), oracle.end());
    EXPECT_EQ(once.size(), comps.size());
    EXPECT_GE(min_pairwise(once), 300.0);
    const auto twice = dedup_cluster(once, 150.0);
    ASSERT_EQ(twice.size(), once.size());
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(twice[i].id, once[i].id);
  }
}

TEST(SettlementFilter, KeptIfAnyRasterHasSettlement) {
  auto r1 = blank_raster(kDakar, 50), r2 = blank_raster(kDakar, 50), r3 = blank_raster(kDakar, 50);
  for (int i = 0; i < 5; ++i) set_cell_at(r1, offset_m(kDakar, 10.0 * i, 20.0));
  const std::vector<RasterGrid> rasters{r1, r2, r3};
  const std::vector<PoiRecord> pts{rec("a", kDakar)};
  EXPECT_EQ(count_settlement_cells(r1, kDakar, 150.0).value(), 5u);
  const auto out = settlement_filter(pts, rasters, 150.0);
  EXPECT_EQ(out.kept.size(), 1u);
  EXPECT_TRUE(out.dropped.empty());
}

TEST(SettlementFilter, DroppedWithoutSettlementOrCoverage) {
  auto r1 = blank_raster(kDakar, 50);
  set_cell_at(r1, offset_m(kDakar, 300, 300));  // outside the 150 m buffer
  const std::vector<RasterGrid> rasters{r1, blank_raster(kDakar, 50)};
  const std::vector<PoiRecord> pts{rec("a", kDakar), rec("far", offset_m(kDakar, 5000, 0))};
  const auto out = settlement_filter(pts, rasters, 150.0);
  EXPECT_TRUE(out.kept.empty());
  ASSERT_EQ(out.dropped.size(), 2u);
  EXPECT_EQ(out.dropped[0].reason, "no settlement");
  EXPECT_EQ(out.dropped[1].reason, "no coverage");
  EXPECT_THROW(settlement_filter(pts, std::vector<RasterGrid>{}, 150.0), ConfigError);
}

TEST(SettlementFilter, CountsMatchBruteForce) {
  auto g = blank_raster(kDakar, 40);
  std::mt19937_64 rng(5);
  for (auto& v : g.values) v = (rng() % 7 == 0) ? 1 : 0;
  for (int t = 0; t < 20; ++t) {
    const auto p = offset_m(kDakar, (rng() % 400) - 200.0, (rng() % 400) - 200.0);
    std::size_t brute = 0;
    for (int r = 0; r < g.height; ++r)
      for (int c = 0; c < g.width; ++c)
        if (g.at(r, c) && geo::haversine_distance(geo::unproject(g.cell_center(r, c)), p) <= 150.0) ++brute;
    EXPECT_EQ(count_settlement_cells(g, p, 150.0).value(), brute);
  }
}

TEST(SettlementFilter, PartitionsInput) {
  auto g = blank_raster(kDakar, 100);
  std::mt19937_64 rng(9);
  for (auto& v : g.values) v = (rng() % 500 == 0) ? 1 : 0;
  std::vector<PoiRecord> pts;
  for (int i = 0; i < 60; ++i)
    pts.push_back(rec("p" + std::to_string(i), offset_m(kDakar, (rng() % 1800) - 900.0, (rng() % 1800) - 900.0)));
  const std::vector<RasterGrid> rasters{g};
  const auto out = settlement_filter(pts, rasters);
  EXPECT_EQ(out.kept.size() + out.dropped.size(), pts.size());
  std::set<std::string> ids;
  for (auto& k : out.kept) ids.insert(k.id);
  for (auto& d : out.dropped) ids.insert(d.record.id);
  EXPECT_EQ(ids.size(), pts.size());
}

TEST(SampleNegatives, RatioSpacingAndDeterminism) {
  auto g = blank_raster(kDakar, 300);  // 6 km square
  std::fill(g.values.begin(), g.values.end(), 1);
  std::vector<PoiRecord> schools;
  for (int i = 0; i < 10; ++i)
    schools.push_back(rec("s" + std::to_string(i), offset_m(kDakar, -2500.0 + 500.0 * i, 0)));
  const std::vector<RasterGrid> rasters{g};
  NegativeSamplingConfig cfg;
  cfg.seed = 42;
  const auto a = sample_negatives(rasters, schools, cfg);
  ASSERT_EQ(a.negatives.size(), 20u);
  EXPECT_FALSE(a.warning.has_value());
  EXPECT_GE(min_pairwise(a.negatives), 300.0);
  for (const auto& n : a.negatives) {
    EXPECT_EQ(n.source, Source::sampled);
    EXPECT_EQ(n.class_label, ClassLabel::non_school);
    EXPECT_NE(g.at(g.cell_of(geo::project(n.location))->first, g.cell_of(geo::project(n.location))->second), 0);
    for (const auto& s : schools) EXPECT_GE(geo::haversine_distance(n.location, s.location), 300.0);
  }
  const auto b = sample_negatives(rasters, schools, cfg);
  ASSERT_EQ(b.negatives.size(), a.negatives.size());
  for (std::size_t i = 0; i < a.negatives.size(); ++i) {
    EXPECT_EQ(a.negatives[i].location, b.negatives[i].location);
    EXPECT_EQ(a.negatives[i].id, b.negatives[i].id);
  }
}

TEST(SampleNegatives, InfeasibleReturnsAllValidSitesWithWarning) {
  // Nine isolated populated cells 1 km apart; two sit within 300 m of a
  // school, so exactly seven sites are valid.
  auto g = blank_raster(kDakar, 250, 10.0);
  std::vector<geo::GeoPoint> sites;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j) sites.push_back(offset_m(kDakar, 1000.0 * i, 1000.0 * j));
  for (const auto& s : sites) set_cell_at(g, s);
  const std::vector<PoiRecord> schools{rec("s1", offset_m(sites[0], 100, 0)),
                                       rec("s2", offset_m(sites[8], 0, -150)),
                                       rec("s3", offset_m(kDakar, 2400, 2400)),
                                       rec("s4", offset_m(kDakar, -2400, 2400)),
                                       rec("s5", offset_m(kDakar, 2400, -2400))};
  // Enumerate valid sites: cell nonzero, >= 300 m from every school (jitter < 8 m).
  std::size_t valid = 0;
  for (const auto& s : sites) {
    bool ok = true;
    for (const auto& sc : schools) ok = ok && geo::haversine_distance(s, sc.location) >= 310.0;
    valid += ok;
  }
  ASSERT_EQ(valid, 7u);
  const std::vector<RasterGrid> rasters{g};
  NegativeSamplingConfig cfg;
  cfg.seed = 1;
  const auto out = sample_negatives(rasters, schools, cfg);
  EXPECT_EQ(out.negatives.size(), 7u);
  ASSERT_TRUE(out.warning.has_value());
  EXPECT_EQ(out.warning->requested, 10u);
  EXPECT_EQ(out.warning->produced, 7u);
}

TEST(RunIngest, FullChainSatisfiesSpacingAudit) {
  TempDir dir;
  auto g = blank_raster(kDakar, 250);  // 5 km square, 10 m cells
  std::mt19937_64 rng(21);
  for (auto& v : g.values) v = (rng() % 3 == 0) ? 1 : 0;
  std::ostringstream asc;
  write_ascii_grid(asc, g);
  dir.write("settle.asc", asc.str());

  std::ostringstream gov, osm;
  gov << "id,name,lat,lon\n";
  osm << "id,name,lat,lon,class\n";
  for (int i = 0; i < 30; ++i) {
    const auto p = offset_m(kDakar, (rng() % 4000) - 2000.0, (rng() % 4000) - 2000.0);
    gov << "g" << i << ",Ecole " << i << "," << p.lat << "," << p.lon << "\n";
    const auto q = offset_m(p, 40, 30);
    osm << "o" << i << "," << (i % 5 == 0 ? "Little Kindergarten" : "School") << "," << q.lat << "," << q.lon << ",school\n";
  }
  for (int i = 0; i < 8; ++i) {
    const auto p = offset_m(kDakar, (rng() % 4000) - 2000.0, (rng() % 4000) - 2000.0);
    osm << "h" << i << ",Hospital," << p.lat << "," << p.lon << ",non_school\n";
  }
  dir.write("gov.csv", gov.str());
  dir.write("osm.csv", osm.str());

  const std::vector<PointSource> inputs{{dir.file("gov.csv"), Source::government},
                                        {dir.file("osm.csv"), Source::osm}};
  const std::vector<RasterGrid> rasters{read_ascii_grid(dir.file("settle.asc"))};
  IngestConfig cfg;
  cfg.country = "TST";
  cfg.negatives.seed = 5;
  const auto result = run_ingest(inputs, rasters, cfg);
  const auto& recs = result.dataset.records;
  ASSERT_FALSE(recs.empty());
  EXPECT_GE(min_pairwise(recs), 300.0);
  std::size_t schools = 0, negs = 0;
  for (const auto& r : recs) (r.class_label == ClassLabel::school ? schools : negs)++;
  EXPECT_EQ(result.audit["counts"]["final_schools"].get<std::size_t>(), schools);
  if (!result.warning) {
    EXPECT_EQ(negs, 2 * schools);
  }
  for (const auto& r : recs) {
    if (r.class_label == ClassLabel::school) {
      EXPECT_NE(r.source, Source::sampled);
    }
  }

  // GeoJSON round trip of the cleaned dataset.
  const auto back = dataset_from_geojson(dataset_to_geojson(result.dataset));
  ASSERT_EQ(back.records.size(), recs.size());
  EXPECT_EQ(back.records[0].id, recs[0].id);
  EXPECT_EQ(back.provenance.country, "TST");
}
