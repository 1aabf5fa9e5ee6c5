#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "schoolmap/fixture.hpp"
#include "schoolmap/ingest.hpp"
#include "schoolmap/synthetic.hpp"
#include "schoolmap/tileset.hpp"
#include "test_util.hpp"

using namespace schoolmap;
namespace st = schoolmap::testing;

namespace {

bool same_image(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

const fixture::Country& country() {
  static const auto c = fixture::make_country();
  return c;
}

}  // namespace

TEST(MakeTileCenter, PinningTheDrawnCenterReproducesTheDefaultTile) {
  const synthetic::SynthConfig cfg;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto t = synthetic::make_tile(s, 1, cfg);
    const std::array<int, 2> c{static_cast<int>(t.cx + 0.5), static_cast<int>(t.cy + 0.5)};
    const auto pinned = synthetic::make_tile(s, 1, cfg, c);
    EXPECT_TRUE(same_image(t.image, pinned.image)) << "seed " << s;
    EXPECT_EQ(t.cx, pinned.cx);
    EXPECT_EQ(t.cy, pinned.cy);
  }
}

TEST(MakeTileCenter, NegativesIgnoreThePin) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    EXPECT_TRUE(same_image(synthetic::make_tile(s, 0).image,
                           synthetic::make_tile(s, 0, {}, std::array<int, 2>{3, 3}).image));
  }
}

TEST(MakeTileCenter, PinnedMotifMayHangOffTheTile) {
  const auto t = synthetic::make_tile(4, 1, {}, std::array<int, 2>{2, 61});
  EXPECT_EQ(t.cx, 1.5);
  EXPECT_EQ(t.cy, 60.5);
  EXPECT_FALSE(same_image(t.image, synthetic::make_tile(4, 1).image));
}

TEST(FixtureCountry, GenerationIsDeterministic) {
  const auto a = fixture::make_country(), b = fixture::make_country();
  EXPECT_EQ(a.government.dump(), b.government.dump());
  EXPECT_EQ(a.osm_csv, b.osm_csv);
  EXPECT_EQ(a.settlement.values, b.settlement.values);
  ASSERT_EQ(a.imaged.size(), b.imaged.size());
  for (std::size_t i = 0; i < a.imaged.size(); ++i) EXPECT_EQ(a.imaged[i].id, b.imaged[i].id);
  fixture::CountryConfig other;
  other.seed = 8;
  EXPECT_NE(fixture::make_country(other).government.dump(), a.government.dump());
}

TEST(FixtureCountry, SchoolsAreSettledInsideTheBoundaryAndSpaced) {
  const auto& c = country();
  const fixture::CountryConfig cfg;
  ASSERT_EQ(c.schools.size(), static_cast<std::size_t>(cfg.schools));
  std::vector<geo::ProjectedPoint> ring;
  for (const auto& p : c.boundary.front().outer) ring.push_back(geo::project(p));
  for (std::size_t i = 0; i < c.schools.size(); ++i) {
    const auto q = geo::project(c.schools[i].location);
    EXPECT_TRUE(fixture::detail::inside(ring, q)) << c.schools[i].id;
    const auto cell = c.settlement.cell_of(q);
    ASSERT_TRUE(cell);
    EXPECT_NE(c.settlement.at(cell->first, cell->second), 0) << c.schools[i].id;
    for (std::size_t j = 0; j < i; ++j) {
      EXPECT_GE(geo::haversine_distance(c.schools[i].location, c.schools[j].location), cfg.school_spacing_m);
    }
  }
  std::size_t missing = 0;
  for (const auto& s : c.schools) missing += !s.in_government;
  EXPECT_EQ(missing, static_cast<std::size_t>(cfg.missing_from_government));
}

TEST(FixtureCountry, EverySchoolHasAFullyVisibleMotifAndTilesHoldAtMostOne) {
  const auto& c = country();
  const fixture::CountryConfig cfg;
  const int S = cfg.synth.size, m = cfg.synth.margin;
  std::set<std::string> seen;
  for (const auto& t : c.imaged) {
    const double res = t.spec.size_m / t.spec.px;
    int near = 0;
    for (const auto& s : c.schools) {
      const auto q = geo::project(s.location);
      const double cx = (q.x - t.spec.min_corner.x) / res, cy = (t.spec.max_y() - q.y) / res;
      if (cx > -6 && cx < S + 6 && cy > -6 && cy < S + 6) ++near;
      if (cx >= m && cx <= S - m && cy >= m && cy <= S - m) seen.insert(s.id);
    }
    EXPECT_LE(near, 1) << t.id;
  }
  EXPECT_EQ(seen.size(), c.schools.size());
}

TEST(FixtureCountry, RenderedMotifSitsAtTheSchool) {
  const auto& c = country();
  const fixture::CountryConfig cfg;
  std::size_t checked = 0;
  for (const auto& t : c.imaged) {
    const auto mc = fixture::motif_center(c, t.spec);
    if (!mc || (*mc)[0] < 12 || (*mc)[0] > 52 || (*mc)[1] < 12 || (*mc)[1] > 52) continue;
    const auto img = fixture::render_tile(c, t, cfg);
    // The courtyard covers the motif center in either orientation.
    for (int k = 0; k < 3; ++k) {
      EXPECT_NEAR(img.at(k, (*mc)[1], (*mc)[0]), cfg.synth.style.courtyard[k], 0.2) << t.id;
    }
    ++checked;
  }
  EXPECT_GE(checked, c.schools.size());
}

TEST(FixtureCountry, IngestSeesEachPlantedDefect) {
  st::TempDir tmp;
  const fixture::CountryConfig cfg;
  fixture::write_country(tmp.path(), cfg);
  const auto raster = read_ascii_grid(tmp.file("settlement.asc"));
  const std::vector<ingest::PointSource> src{{tmp.file("government.geojson"), ingest::Source::government},
                                             {tmp.file("osm.csv"), ingest::Source::osm}};
  const auto r = ingest::run_ingest(src, std::span<const RasterGrid>(&raster, 1), {});
  const auto& n = r.audit["counts"];
  const int listed = cfg.schools - cfg.missing_from_government;
  // Government: listed schools, annex, government-only, kindergarten, remote;
  // the unlocated record is rejected. OSM: one duplicate, one unlisted school.
  EXPECT_EQ(n["schools_loaded"], listed + 1 + cfg.government_only + 1 + 1 + 2);
  EXPECT_EQ(r.audit["rejects"].size(), 1u);
  ASSERT_EQ(r.audit["keyword_excluded"].size(), 1u);
  EXPECT_EQ(r.audit["keyword_excluded"][0]["name"], "Little Stars Kindergarten");
  EXPECT_EQ(n["schools_after_dedup"], listed + cfg.government_only + 1 + 1);
  EXPECT_EQ(n["schools_after_settlement"], listed + cfg.government_only + 1);
  ASSERT_EQ(r.audit["settlement_dropped"].size(), 1u);
  EXPECT_EQ(n["non_schools_loaded"], 4);
}

TEST(FixtureCountry, WritesEveryInputFile) {
  st::TempDir tmp;
  fixture::CountryConfig cfg;
  cfg.train_tiles = 30;
  const auto c = fixture::write_country(tmp.path(), cfg);
  for (const char* f : {"boundary.geojson", "settlement.asc", "government.geojson", "osm.csv", "truth.geojson",
                        "train/labels.csv"}) {
    EXPECT_TRUE(std::filesystem::exists(tmp.path() / f)) << f;
  }
  EXPECT_EQ(geojson::parse_polygons(geojson::read_file(tmp.file("boundary.geojson"))).size(), 1u);
  std::size_t images = 0;
  for (const auto& e : std::filesystem::directory_iterator(tmp.path() / "images")) images += e.is_regular_file();
  EXPECT_EQ(images, c.imaged.size());
  EXPECT_EQ(read_ascii_grid(tmp.file("settlement.asc")).values, c.settlement.values);
}

TEST(FixtureTrainingSet, ClassRatioAndSplitFractions) {
  fixture::CountryConfig cfg;
  cfg.train_tiles = 300;
  const auto ts = fixture::training_set(cfg);
  std::size_t pos = 0, train = 0, val = 0, test = 0;
  for (const auto& e : ts.entries) {
    pos += e.label;
    train += e.split == split::Split::train;
    val += e.split == split::Split::val;
    test += e.split == split::Split::test;
    if (e.label) EXPECT_GE(e.cx, 0.0);
    else EXPECT_EQ(e.cx, -1.0);
  }
  EXPECT_EQ(pos, 100u);
  EXPECT_EQ(train, 240u);
  EXPECT_EQ(val, 30u);
  EXPECT_EQ(test, 30u);
}

TEST(TileSet, RoundTripsEntriesAndImages) {
  st::TempDir tmp;
  fixture::CountryConfig cfg;
  cfg.train_tiles = 12;
  const auto ts = fixture::training_set(cfg);
  tileset::write_tileset(tmp.path(), ts);
  const auto back = tileset::read_tileset(tmp.path());
  ASSERT_EQ(back.entries.size(), ts.entries.size());
  for (std::size_t i = 0; i < ts.entries.size(); ++i) {
    EXPECT_EQ(back.entries[i].id, ts.entries[i].id);
    EXPECT_EQ(back.entries[i].label, ts.entries[i].label);
    EXPECT_EQ(back.entries[i].split, ts.entries[i].split);
    EXPECT_EQ(back.entries[i].cx, ts.entries[i].cx);
    EXPECT_TRUE(same_image(back.images[i], ts.images[i]));
  }
  EXPECT_EQ(back.samples(split::Split::train).size(), back.indices(split::Split::train).size());
  EXPECT_TRUE(tileset::read_tileset(tmp.path(), false).images.empty());
}

TEST(TileSet, RejectsMalformedLabels) {
  const std::vector<std::string> bad{
      "id,label,split\nt0,1,train\n",
      "id,label,split,cx,cy\nt0,2,train,-1,-1\n",
      "id,label,split,cx,cy\nt0,1,train,-1,-1\nt0,0,val,-1,-1\n",
      "id,label,split,cx,cy\nt0,1,holdout,-1,-1\n",
      "id,label,split,cx,cy\n../t0,1,train,-1,-1\n",
      "id,label,split,cx,cy\nt0,1,train,x,-1\n",
  };
  for (const auto& text : bad) {
    st::TempDir tmp;
    tmp.write("labels.csv", text);
    EXPECT_THROW(tileset::read_tileset(tmp.path(), false), DataError) << text;
  }
  st::TempDir empty;
  EXPECT_THROW(tileset::read_tileset(empty.path()), DataError);
}

TEST(TileSet, MissingImageIsADataError) {
  st::TempDir tmp;
  tmp.write("labels.csv", "id,label,split,cx,cy\nt0,1,train,-1,-1\n");
  EXPECT_THROW(tileset::read_tileset(tmp.path()), DataError);
}
