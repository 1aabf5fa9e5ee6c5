#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "schoolmap/geo.hpp"

using namespace schoolmap;
using namespace schoolmap::geo;

namespace {

GeoPoint random_point(std::mt19937_64& rng, double max_lat = 84.0) {
  std::uniform_real_distribution<double> lat(-max_lat, max_lat), lon(-180.0, 180.0);
  return {lat(rng), lon(rng)};
}

}  // namespace

TEST(Haversine, IdentityIsZero) {
  const GeoPoint p{14.7, -17.4};
  EXPECT_EQ(haversine_distance(p, p), 0.0);
}

TEST(Haversine, OneDegreeOfLongitudeAtEquator) {
  const double expected = 2.0 * std::numbers::pi * 6'371'000.0 / 360.0;
  EXPECT_NEAR(haversine_distance({0, 0}, {0, 1}), expected, 1e-6);
  EXPECT_NEAR(haversine_distance({0, 0}, {0, 1}), 111'194.9, 0.1);
}

TEST(Haversine, SymmetricAndTriangle) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 100; ++i) {
    const auto a = random_point(rng), b = random_point(rng), c = random_point(rng);
    EXPECT_EQ(haversine_distance(a, b), haversine_distance(b, a));
    EXPECT_GE(haversine_distance(a, b), 0.0);
    EXPECT_LE(haversine_distance(a, c), haversine_distance(a, b) + haversine_distance(b, c) + 1e-6);
  }
}

TEST(Mercator, OriginAndAntimeridian) {
  const auto o = project({0, 0});
  EXPECT_EQ(o.x, 0.0);
  EXPECT_NEAR(o.y, 0.0, 1e-9);
  EXPECT_NEAR(project({0, 180}).x, 20'037'508.34, 0.01);
}

TEST(Mercator, RoundTrip) {
  std::mt19937_64 rng(11);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = random_point(rng, 84.0);
    const auto q = unproject(project(p));
    worst = std::max({worst, std::abs(q.lat - p.lat), std::abs(q.lon - p.lon)});
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Mercator, RejectsPolarLatitudes) {
  EXPECT_THROW(project({85.1, 0}), DataError);
  EXPECT_THROW(project({-89.0, 0}), DataError);
  EXPECT_THROW(project({std::nan(""), 0}), DataError);
}

TEST(PixelToGeo, CenterPixelNearTileCenter) {
  const auto tile = TileSpec::centered_on({14.7, -17.4});
  tile.validate();
  const auto c = tile.center();
  const auto q = pixel_center_projected(tile, 250, 250);
  EXPECT_LT(std::hypot(q.x - c.x, q.y - c.y), 0.6);
  const auto g = pixel_to_geo(tile, 250, 250);
  EXPECT_NEAR(project(g).x, q.x, 1e-6);
}

TEST(PixelToGeo, TopLeftPixelIsHalfPixelInside) {
  const TileSpec tile{{1000.0, 2000.0}, 300.0, 500, 0.6};
  const auto q = pixel_center_projected(tile, 0, 0);
  EXPECT_NEAR(q.x, 1000.3, 1e-9);
  EXPECT_NEAR(q.y, 2300.0 - 0.3, 1e-9);
}

TEST(PixelToGeo, AdjacentPixelsAreOneResolutionApart) {
  const TileSpec tile{{1000.0, 2000.0}, 300.0, 500, 0.6};
  const auto a = pixel_center_projected(tile, 10, 20);
  const auto b = pixel_center_projected(tile, 11, 20);
  EXPECT_NEAR(b.x - a.x, 0.6, 1e-9);
  EXPECT_EQ(a.y, b.y);
}

TEST(PixelToGeo, OutOfRangeAndInjective) {
  const TileSpec tile{{0.0, 0.0}, 30.0, 50, 0.6};
  EXPECT_THROW(pixel_to_geo(tile, 50, 0), DataError);
  EXPECT_THROW(pixel_to_geo(tile, 0, -1), DataError);
  std::set<std::pair<double, double>> seen;
  for (int y = 0; y < 50; ++y)
    for (int x = 0; x < 50; ++x) {
      const auto q = pixel_center_projected(tile, x, y);
      EXPECT_TRUE(q.x > tile.min_corner.x && q.x < tile.max_x());
      EXPECT_TRUE(q.y > tile.min_corner.y && q.y < tile.max_y());
      seen.insert({q.x, q.y});
    }
  EXPECT_EQ(seen.size(), 2500u);
}

TEST(TileSpec, ValidateRejectsInconsistentResolution) {
  EXPECT_THROW((TileSpec{{0, 0}, 300.0, 500, 0.5}.validate()), DataError);
  EXPECT_THROW((TileSpec{{0, 0}, 0.0, 0, 0.6}.validate()), DataError);
}

TEST(BuffersOverlap, StrictAtTwiceRadius) {
  // Points due north along a meridian: distance = R * dphi exactly.
  const GeoPoint a{10.0, 5.0};
  auto north_by = [&](double meters) {
    return GeoPoint{a.lat + to_degrees(meters / kEarthRadiusM), a.lon};
  };
  EXPECT_TRUE(buffers_overlap(a, north_by(100.0), 150.0));
  EXPECT_FALSE(buffers_overlap(a, north_by(300.0 + 1e-7), 150.0));
  EXPECT_TRUE(buffers_overlap(a, a, 1e-3));
  const GeoPoint b = north_by(300.0);
  EXPECT_EQ(buffers_overlap(a, b, 150.0), haversine_distance(a, b) < 300.0);
}
