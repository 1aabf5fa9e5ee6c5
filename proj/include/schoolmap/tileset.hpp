#pragma once

// Labeled image-level tile sets on disk: `<dir>/labels.csv` with header
// id,label,split,cx,cy plus one `<dir>/<id>.gten` image per row. cx/cy hold
// the motif center in pixels for positives with a known location, else -1.

#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "schoolmap/csv.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/model.hpp"
#include "schoolmap/split.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::tileset {

struct Entry {
  std::string id;
  int label = 0;
  split::Split split = split::Split::train;
  double cx = -1.0;
  double cy = -1.0;
};

struct TileSet {
  std::vector<Entry> entries;
  std::vector<Tensor> images;  // parallel to entries; empty when not loaded

  std::vector<model::Sample> samples(split::Split s) const {
    std::vector<model::Sample> out;
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].split == s) out.push_back({images.at(i), entries[i].label});
    }
    return out;
  }

  std::vector<std::size_t> indices(split::Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].split == s) out.push_back(i);
    return out;
  }
};

inline void write_tileset(const std::filesystem::path& dir, const TileSet& ts) {
  if (ts.images.size() != ts.entries.size()) throw DataError("tile set needs one image per entry");
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "labels.csv", std::ios::binary);
  if (!out) throw DataError("cannot write '" + (dir / "labels.csv").string() + "'");
  out << "id,label,split,cx,cy\n";
  for (std::size_t i = 0; i < ts.entries.size(); ++i) {
    const auto& e = ts.entries[i];
    out << csv::escape(e.id) << "," << e.label << "," << split::to_string(e.split) << "," << e.cx
        << "," << e.cy << "\n";
    write_tensor(ts.images[i], (dir / (e.id + ".gten")).string());
  }
  if (!out) throw DataError("short write to '" + (dir / "labels.csv").string() + "'");
}

inline TileSet read_tileset(const std::filesystem::path& dir, bool load_images = true) {
  const auto path = dir / "labels.csv";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("tile set '" + dir.string() + "' has no labels.csv");
  csv::Row row;
  if (!csv::read_row(in, row) || row != csv::Row{"id", "label", "split", "cx", "cy"}) {
    throw DataError(path.string() + ": header must be id,label,split,cx,cy");
  }
  TileSet ts;
  std::unordered_set<std::string> seen;
  for (std::size_t line = 2; csv::read_row(in, row); ++line) {
    if (row.size() == 1 && row[0].empty()) continue;
    const auto where = path.string() + " line " + std::to_string(line);
    if (row.size() != 5) throw DataError(where + ": expected 5 fields");
    Entry e;
    e.id = row[0];
    if (e.id.empty() || e.id.find_first_of("/\\") != std::string::npos) {
      throw DataError(where + ": invalid tile id '" + e.id + "'");
    }
    if (!seen.insert(e.id).second) throw DataError(where + ": duplicate id '" + e.id + "'");
    if (row[1] != "0" && row[1] != "1") throw DataError(where + ": label must be 0 or 1");
    e.label = row[1] == "1";
    e.split = split::parse_split(row[2]);
    try {
      e.cx = std::stod(row[3]);
      e.cy = std::stod(row[4]);
    } catch (const std::exception&) {
      throw DataError(where + ": cx/cy must be numbers");
    }
    ts.entries.push_back(std::move(e));
  }
  if (load_images) {
    for (const auto& e : ts.entries) ts.images.push_back(read_tensor((dir / (e.id + ".gten")).string()));
  }
  return ts;
}

}  // namespace schoolmap::tileset
