#pragma once

// Buffer-overlap clustering shared by dataset deduplication and prediction
// aggregation: points whose r-disks intersect are linked, and connected
// components of that graph are merged.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "schoolmap/geo.hpp"

namespace schoolmap {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t i) {
    while (parent_[i] != i) {
      parent_[i] = parent_[parent_[i]];
      i = parent_[i];
    }
    return i;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<unsigned> rank_;
};

// Calls fn(i, j) for every pair i < j with haversine distance < max_dist_m.
// Sweeps in latitude order; the latitude gap bounds the distance from below,
// so the sweep is exact.
template <typename Fn>
void for_each_close_pair(std::span<const geo::GeoPoint> points, double max_dist_m, Fn&& fn) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return points[a].lat < points[b].lat || (points[a].lat == points[b].lat && a < b);
  });
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const auto& a = points[order[oi]];
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const auto& b = points[order[oj]];
      if (geo::latitude_gap_m(a.lat, b.lat) >= max_dist_m) break;
      if (geo::haversine_distance(a, b) < max_dist_m) {
        fn(std::min(order[oi], order[oj]), std::max(order[oi], order[oj]));
      }
    }
  }
}

// Component label per point; labels are the smallest member index, so the
// result does not depend on evaluation order.
inline std::vector<std::size_t> overlap_components(std::span<const geo::GeoPoint> points,
                                                   double buffer_r_m) {
  UnionFind uf(points.size());
  for_each_close_pair(points, 2.0 * buffer_r_m,
                      [&](std::size_t i, std::size_t j) { uf.unite(i, j); });
  std::vector<std::size_t> root_min(points.size(), points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto& m = root_min[uf.find(i)];
    m = std::min(m, i);
  }
  std::vector<std::size_t> label(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) label[i] = root_min[uf.find(i)];
  return label;
}

// Groups member indices by component, components ordered by smallest member.
inline std::vector<std::vector<std::size_t>> group_components(
    std::span<const std::size_t> labels) {
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> slot(labels.size(), labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::size_t l = labels[i];
    if (slot[l] == labels.size()) {
      slot[l] = groups.size();
      groups.emplace_back();
    }
    groups[slot[l]].push_back(i);
  }
  return groups;
}

}  // namespace schoolmap
