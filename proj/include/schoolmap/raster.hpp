#pragma once

// Integer raster grids in projected (Web Mercator) meters, read from ESRI
// ASCII grid files. Row 0 is the northern-most row, as in the file.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "schoolmap/error.hpp"
#include "schoolmap/geo.hpp"

namespace schoolmap {

struct RasterGrid {
  geo::ProjectedPoint origin;  // lower-left corner
  double cell_size_m = 10.0;
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> values;  // row-major, row 0 = north

  void validate() const {
    if (!(cell_size_m > 0.0)) throw DataError("raster cell size must be positive");
    if (width < 0 || height < 0 ||
        static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != values.size()) {
      throw DataError("raster dimensions do not match value count");
    }
  }

  double min_x() const { return origin.x; }
  double min_y() const { return origin.y; }
  double max_x() const { return origin.x + width * cell_size_m; }
  double max_y() const { return origin.y + height * cell_size_m; }

  std::int32_t at(int row, int col) const {
    return values[static_cast<std::size_t>(row) * width + col];
  }

  geo::ProjectedPoint cell_center(int row, int col) const {
    return {origin.x + (col + 0.5) * cell_size_m,
            origin.y + (height - row - 0.5) * cell_size_m};
  }

  bool covers(const geo::ProjectedPoint& p) const {
    return p.x >= min_x() && p.x < max_x() && p.y > min_y() && p.y <= max_y();
  }

  // (row, col) of the cell containing p, if any.
  std::optional<std::pair<int, int>> cell_of(const geo::ProjectedPoint& p) const {
    if (!covers(p)) return std::nullopt;
    int col = static_cast<int>(std::floor((p.x - origin.x) / cell_size_m));
    int row = static_cast<int>(std::floor((max_y() - p.y) / cell_size_m));
    col = std::clamp(col, 0, width - 1);
    row = std::clamp(row, 0, height - 1);
    return std::pair{row, col};
  }
};

// NODATA cells are stored as `nodata_as`.
inline RasterGrid parse_ascii_grid(std::istream& in, std::int32_t nodata_as = 0) {
  RasterGrid g;
  double xll = 0.0, yll = 0.0;
  bool have_cols = false, have_rows = false, have_x = false, have_y = false,
       have_cell = false;
  bool x_center = false, y_center = false;
  std::optional<double> nodata;
  std::string key;
  // Header keys are case-insensitive and precede the first numeric token.
  while (in >> std::ws && in.peek() != EOF && std::isalpha(in.peek())) {
    in >> key;
    for (auto& c : key) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    double v = 0.0;
    if (!(in >> v)) throw DataError("ASCII grid: missing value for header key '" + key + "'");
    if (key == "ncols") { g.width = static_cast<int>(v); have_cols = true; }
    else if (key == "nrows") { g.height = static_cast<int>(v); have_rows = true; }
    else if (key == "xllcorner") { xll = v; have_x = true; }
    else if (key == "yllcorner") { yll = v; have_y = true; }
    else if (key == "xllcenter") { xll = v; have_x = true; x_center = true; }
    else if (key == "yllcenter") { yll = v; have_y = true; y_center = true; }
    else if (key == "cellsize") { g.cell_size_m = v; have_cell = true; }
    else if (key == "nodata_value") { nodata = v; }
    else throw DataError("ASCII grid: unknown header key '" + key + "'");
  }
  if (!(have_cols && have_rows && have_x && have_y && have_cell)) {
    throw DataError("ASCII grid: header must define ncols, nrows, xllcorner, yllcorner, cellsize");
  }
  if (g.width <= 0 || g.height <= 0) throw DataError("ASCII grid: non-positive dimensions");
  if (!(g.cell_size_m > 0.0)) throw DataError("ASCII grid: non-positive cellsize");
  if (x_center) xll -= g.cell_size_m / 2.0;
  if (y_center) yll -= g.cell_size_m / 2.0;
  g.origin = {xll, yll};
  const std::size_t n = static_cast<std::size_t>(g.width) * g.height;
  g.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    if (!(in >> v)) {
      throw DataError("ASCII grid: expected " + std::to_string(n) + " cells, found " +
                      std::to_string(i));
    }
    g.values[i] = (nodata && v == *nodata) ? nodata_as : static_cast<std::int32_t>(std::lround(v));
  }
  return g;
}

inline RasterGrid read_ascii_grid(const std::string& path, std::int32_t nodata_as = 0) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open raster '" + path + "'");
  try {
    return parse_ascii_grid(in, nodata_as);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void write_ascii_grid(std::ostream& out, const RasterGrid& g, int nodata = -9999) {
  std::ostringstream hdr;
  hdr.precision(17);
  hdr << "ncols " << g.width << "\nnrows " << g.height << "\nxllcorner " << g.origin.x
      << "\nyllcorner " << g.origin.y << "\ncellsize " << g.cell_size_m
      << "\nNODATA_value " << nodata << "\n";
  out << hdr.str();
  for (int r = 0; r < g.height; ++r) {
    for (int c = 0; c < g.width; ++c) out << (c ? " " : "") << g.at(r, c);
    out << "\n";
  }
}

}  // namespace schoolmap
