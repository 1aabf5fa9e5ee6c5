#pragma once

// One function per pipeline stage. Each reads its inputs from the config or
// from earlier stage directories under paths.out, and writes its outputs
// through a StageRunner so reruns with unchanged inputs are skipped.
//
//   ingest     ingest/dataset.geojson, audit.json
//   split      split/split.csv, strata.json
//   train-toy  train-toy/model/, history.json
//   lr-find    lr-find/lr_range.csv, lr_range.json
//   infer      infer/scores.csv
//   metrics    metrics/metrics.json, table.txt
//   cam        cam/cam.json, maps/<id>.png
//   road-eval  road-eval/road.json, road.txt
//   tiles      tiles/tiles.geojson, counts.json
//   sweep      sweep/predictions.geojson, sweep.json
//   aggregate  aggregate/predictions.geojson, run_manifest.json
//   match      match/stats.json, pairs.json, predictions.geojson, government_cleaned.geojson

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "schoolmap/cam.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/geojson.hpp"
#include "schoolmap/ingest.hpp"
#include "schoolmap/metrics.hpp"
#include "schoolmap/model.hpp"
#include "schoolmap/nationwide.hpp"
#include "schoolmap/parallel.hpp"
#include "schoolmap/pipeline.hpp"
#include "schoolmap/png.hpp"
#include "schoolmap/raster.hpp"
#include "schoolmap/roadeval.hpp"
#include "schoolmap/split.hpp"
#include "schoolmap/tileset.hpp"
#include "schoolmap/valsvc.hpp"

namespace schoolmap::stages {

namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::Config;
using pipeline::Log;
using pipeline::StageOutcome;
using pipeline::StageRunner;
using pipeline::StageSpec;

struct Context {
  const Config& config;
  const StageRunner& runner;
  const Log& log;

  fs::path out(const std::string& stage, const std::string& file = {}) const {
    return file.empty() ? runner.dir(stage) : runner.dir(stage) / file;
  }
  std::size_t workers() const {
    const auto w = config.integer("workers");
    if (w < 1) throw ConfigError("workers must be at least 1");
    return static_cast<std::size_t>(w);
  }
  std::uint64_t seed() const { return static_cast<std::uint64_t>(config.integer("seed")); }
};

namespace detail {

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
  if (!out) throw DataError("cannot write '" + p.string() + "'");
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<RasterGrid> read_rasters(const std::vector<fs::path>& paths) {
  std::vector<RasterGrid> out;
  for (const auto& p : paths) out.push_back(read_ascii_grid(p.string()));
  return out;
}

inline std::vector<fs::path> settlement_paths(const Config& c) {
  auto ps = c.paths("inputs.settlement");
  if (ps.empty()) throw ConfigError("config key 'inputs.settlement' must name at least one raster");
  return ps;
}

inline fs::path model_dir(const Context& cx) { return cx.out("train-toy", "model"); }

inline model::ToyBackend load_backend(const Context& cx) {
  json extra;
  auto m = model::load_model(model_dir(cx), &extra);
  return model::ToyBackend(std::move(m), extra.value("model_id", "toy"));
}

inline model::TrainConfig train_config(const Config& c) {
  model::TrainConfig t;
  const auto bs = c.integer("train.batch_size");
  if (bs < 1) throw ConfigError("train.batch_size must be positive");
  t.batch_size = static_cast<std::size_t>(bs);
  t.max_epochs = static_cast<int>(c.integer("train.max_epochs"));
  t.label_smoothing = c.real("train.label_smoothing");
  t.initial_lr = c.real("train.initial_lr");
  t.plateau_factor = c.real("train.plateau_factor");
  t.plateau_patience = static_cast<int>(c.integer("train.plateau_patience"));
  t.early_stop_lr = c.real("train.early_stop_lr");
  t.augment = c.boolean("train.augment");
  t.seed = static_cast<std::uint64_t>(c.integer("seed"));
  t.validate();
  return t;
}

inline model::ToyArch arch_for(const tileset::TileSet& ts) {
  if (ts.images.empty()) throw DataError("tile set is empty");
  const auto& s = ts.images.front().shape();
  if (s.size() != 3) throw DataError("tile images must be [C, S, S]");
  model::ToyArch a;
  a.in_channels = static_cast<int>(s[0]);
  a.image_size = static_cast<int>(s[1]);
  return a;
}

inline std::vector<cam::Method> methods_list(const std::string& v) {
  std::vector<cam::Method> out;
  for (const auto& s : Config::split_list(v)) out.push_back(cam::parse_method(s));
  if (out.empty()) throw ConfigError("road.methods lists no CAM method");
  return out;
}

struct Scores {
  std::vector<std::string> ids;
  std::vector<split::Split> splits;
  std::vector<int> labels;
  std::vector<double> probs;

  void subset(split::Split s, std::vector<double>& p, std::vector<int>& l) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (splits[i] == s) {
        p.push_back(probs[i]);
        l.push_back(labels[i]);
      }
  }
};

inline Scores read_scores(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open '" + p.string() + "'");
  csv::Row row;
  if (!csv::read_row(in, row) || row != csv::Row{"id", "split", "label", "probability"}) {
    throw DataError(p.string() + ": header must be id,split,label,probability");
  }
  Scores s;
  while (csv::read_row(in, row)) {
    if (row.size() == 1 && row[0].empty()) continue;
    if (row.size() != 4) throw DataError(p.string() + ": expected 4 fields");
    s.ids.push_back(row[0]);
    s.splits.push_back(split::parse_split(row[1]));
    s.labels.push_back(std::stoi(row[2]));
    s.probs.push_back(std::stod(row[3]));
  }
  return s;
}

// tau from config, or tau* chosen by the metrics stage.
inline double sweep_tau(const Context& cx) {
  const auto v = cx.config.str("sweep.tau");
  if (v != "auto") {
    try {
      std::size_t used = 0;
      const double t = std::stod(v, &used);
      if (used == v.size() && t >= 0.0 && t <= 1.0) return t;
    } catch (const std::exception&) {
    }
    throw ConfigError("sweep.tau must be 'auto' or a number in [0, 1], got '" + v + "'");
  }
  const auto p = cx.out("metrics", "metrics.json");
  if (!fs::exists(p)) {
    throw DataError("sweep.tau = auto needs '" + p.string() + "'; run the metrics stage or set sweep.tau");
  }
  return geojson::read_file(p.string()).at("threshold").at("tau_star").get<double>();
}

inline std::vector<fs::path> with_optional(std::vector<fs::path> v, const std::optional<fs::path>& p) {
  if (p) v.push_back(*p);
  return v;
}

}  // namespace detail

// --- data ----------------------------------------------------------------------

inline StageOutcome ingest(const Context& cx) {
  const auto& c = cx.config;
  std::vector<ingest::PointSource> sources{{c.require_path("inputs.government").string(), ingest::Source::government}};
  if (const auto p = c.path("inputs.osm")) sources.push_back({p->string(), ingest::Source::osm});
  if (const auto p = c.path("inputs.overture")) sources.push_back({p->string(), ingest::Source::overture});
  const auto rasters = detail::settlement_paths(c);
  std::vector<fs::path> inputs;
  for (const auto& s : sources) inputs.push_back(s.path);
  inputs.insert(inputs.end(), rasters.begin(), rasters.end());
  const auto rules = c.path("inputs.exclusion_rules");
  inputs = detail::with_optional(inputs, rules);
  return cx.runner.run({"ingest", inputs, c.parameters({"ingest.", "country.", "seed"})}, [&](const fs::path& dir) {
    ingest::IngestConfig ic;
    ic.country = c.str("country.code");
    ic.dedup_buffer_m = c.real("ingest.dedup_buffer_m");
    ic.settlement_buffer_m = c.real("ingest.settlement_buffer_m");
    ic.negatives.ratio = c.real("ingest.negative_ratio");
    ic.negatives.min_spacing_m = c.real("ingest.negative_min_spacing_m");
    ic.negatives.min_school_dist_m = c.real("ingest.negative_min_school_dist_m");
    ic.negatives.seed = cx.seed();
    if (rules) {
      std::ifstream in(*rules);
      if (!in) throw DataError("cannot open exclusion rules '" + rules->string() + "'");
      ic.rules = ingest::ExclusionRules::parse(in);
    }
    const auto grids = detail::read_rasters(rasters);
    auto r = ingest::run_ingest(sources, grids, ic);
    if (r.warning) {
      cx.log.warn("ingest", r.warning->reason,
                  {{"requested", r.warning->requested}, {"produced", r.warning->produced}});
    }
    cx.log.info("ingest", "counts", {{"counts", r.audit["counts"]}});
    geojson::write_file((dir / "dataset.geojson").string(), ingest::dataset_to_geojson(r.dataset));
    geojson::write_file((dir / "audit.json").string(), r.audit);
  });
}

inline StageOutcome split(const Context& cx) {
  const auto& c = cx.config;
  const auto dataset = cx.out("ingest", "dataset.geojson");
  const auto smod_key = c.path("inputs.smod");
  const auto smod = smod_key ? *smod_key : detail::settlement_paths(c).front();
  return cx.runner.run({"split", {dataset, smod}, c.parameters({"split.", "seed"})}, [&](const fs::path& dir) {
    const auto ds = ingest::dataset_from_geojson(geojson::read_file(dataset.string()));
    const auto grid = read_ascii_grid(smod.string());
    std::vector<split::LabeledRecord> recs;
    for (const auto& r : ds.records) recs.push_back({r, split::assign_stratum(r, grid)});
    const split::Fractions f{c.real("split.train"), c.real("split.val"), c.real("split.test")};
    if (!(f.train >= 0 && f.val >= 0 && f.test >= 0 && f.train + f.val + f.test > 0)) {
      throw ConfigError("split fractions must be non-negative with a positive sum");
    }
    const auto a = split::stratified_split(recs, f, cx.seed(), c.real("split.min_spacing_m"));
    std::ostringstream csv;
    split::write_split_csv(csv, a);
    detail::write_text(dir / "split.csv", csv.str());
    geojson::write_file((dir / "strata.json").string(), split::strata_report(recs, a));
  });
}

// --- model ----------------------------------------------------------------------

inline StageOutcome train_toy(const Context& cx) {
  const auto& c = cx.config;
  const auto train_dir = c.require_path("inputs.train");
  auto params = c.parameters({"train.", "seed"});
  return cx.runner.run({"train-toy", {train_dir}, params}, [&](const fs::path& dir) {
    const auto ts = tileset::read_tileset(train_dir);
    const auto tr = ts.samples(split::Split::train), va = ts.samples(split::Split::val);
    const auto tc = detail::train_config(c);
    cx.log.info("train-toy", "training", {{"train", tr.size()}, {"val", va.size()}, {"max_epochs", tc.max_epochs}});
    const auto r = model::train_toy(tr, va, detail::arch_for(ts), tc);
    for (const auto& e : r.history) {
      cx.log.info("train-toy", "epoch", {{"epoch", e.epoch}, {"train_loss", e.train_loss},
                                         {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}, {"lr", e.lr}});
    }
    const std::string id =
        "toy-" + pipeline::content_hash(train_dir).substr(0, 8) + "-" +
        pipeline::hex64(pipeline::fnv1a(params.dump())).substr(0, 8);
    model::save_model(dir / "model", r.model,
                      {{"model_id", id}, {"best_epoch", r.best_epoch}, {"stop_reason", r.stop_reason}});
    geojson::write_file((dir / "history.json").string(),
                        {{"model_id", id}, {"best_epoch", r.best_epoch}, {"stop_reason", r.stop_reason},
                         {"epochs", model::to_json(r.history)}});
  });
}

inline StageOutcome lr_find(const Context& cx) {
  const auto& c = cx.config;
  const auto train_dir = c.require_path("inputs.train");
  return cx.runner.run({"lr-find", {train_dir}, c.parameters({"train.", "lrfind.", "seed"})},
                       [&](const fs::path& dir) {
    const auto ts = tileset::read_tileset(train_dir);
    model::LrRangeConfig rc;
    rc.lr_min = c.real("lrfind.lr_min");
    rc.lr_max = c.real("lrfind.lr_max");
    const auto it = c.integer("lrfind.iterations");
    if (it < 1) throw ConfigError("lrfind.iterations must be positive");
    rc.iterations = static_cast<std::size_t>(it);
    const auto r = model::lr_range_test(ts.samples(split::Split::train), detail::arch_for(ts),
                                        detail::train_config(c), rc);
    std::ostringstream csv;
    csv << "step,lr,loss,smoothed\n";
    for (std::size_t i = 0; i < r.lrs.size(); ++i) {
      csv << i << "," << detail::fmt(r.lrs[i]) << "," << detail::fmt(r.losses[i]) << ","
          << detail::fmt(r.smoothed[i]) << "\n";
    }
    detail::write_text(dir / "lr_range.csv", csv.str());
    geojson::write_file((dir / "lr_range.json").string(),
                        {{"suggested_lr", r.suggested_lr}, {"suggested_index", r.suggested_index},
                         {"iterations", rc.iterations}});
    cx.log.info("lr-find", "suggested", {{"lr", r.suggested_lr}});
  });
}

inline StageOutcome infer(const Context& cx) {
  const auto& c = cx.config;
  const auto train_dir = c.require_path("inputs.train");
  return cx.runner.run({"infer", {train_dir, detail::model_dir(cx)}, json::object()}, [&](const fs::path& dir) {
    const auto ts = tileset::read_tileset(train_dir);
    const auto backend = detail::load_backend(cx);
    std::vector<double> p(ts.entries.size());
    parallel_for(p.size(), cx.workers(), [&](std::size_t i) { p[i] = backend.infer(ts.images[i]).school_probability(); });
    std::ostringstream csv;
    csv << "id,split,label,probability\n";
    for (std::size_t i = 0; i < p.size(); ++i) {
      const auto& e = ts.entries[i];
      csv << csv::escape(e.id) << "," << split::to_string(e.split) << "," << e.label << "," << detail::fmt(p[i]) << "\n";
    }
    detail::write_text(dir / "scores.csv", csv.str());
  });
}

inline StageOutcome metrics(const Context& cx) {
  const auto& c = cx.config;
  const auto scores = cx.out("infer", "scores.csv");
  return cx.runner.run({"metrics", {scores}, c.parameters({"metrics."})}, [&](const fs::path& dir) {
    const auto s = detail::read_scores(scores);
    const double beta = c.real("metrics.beta");
    if (!(beta > 0.0)) throw ConfigError("metrics.beta must be positive");
    std::vector<double> vp, tp;
    std::vector<int> vl, tl;
    s.subset(split::Split::val, vp, vl);
    s.subset(split::Split::test, tp, tl);
    const auto sweep = metrics::optimize_threshold(vp, vl, beta);
    const auto row = metrics::threshold_report("test", vp, vl, tp, tl, beta);
    const auto curve = metrics::pr_curve(tp, tl);
    json j{{"beta", beta},
           {"test", {{"auprc", curve.auprc}, {"pr_curve", metrics::to_json(curve)}, {"size", tp.size()}}},
           {"val", {{"auprc", metrics::auprc(vp, vl)}, {"size", vp.size()}}},
           {"threshold", metrics::to_json(sweep)},
           {"test_at_tau_star", {{"precision", row.precision}, {"recall", row.recall}, {"f", row.f}}}};
    j["threshold"]["tau_star"] = sweep.tau_star();
    geojson::write_file((dir / "metrics.json").string(), j);
    const std::vector<metrics::ThresholdReportRow> rows{row};
    detail::write_text(dir / "table.txt", metrics::render_threshold_table(rows));
    cx.log.info("metrics", "test", {{"auprc", curve.auprc}, {"tau_star", sweep.tau_star()}, {"f", row.f}});
  });
}

inline StageOutcome cam_maps(const Context& cx) {
  const auto& c = cx.config;
  const auto train_dir = c.require_path("inputs.train");
  return cx.runner.run({"cam", {train_dir, detail::model_dir(cx)}, c.parameters({"cam."})}, [&](const fs::path& dir) {
    const auto method = cam::parse_method(c.str("cam.method"));
    const auto which = split::parse_split(c.str("cam.split"));
    const auto ts = tileset::read_tileset(train_dir);
    const auto backend = detail::load_backend(cx);
    std::vector<std::size_t> idx;
    for (auto i : ts.indices(which))
      if (ts.entries[i].label == 1) idx.push_back(i);
    std::vector<json> rows(idx.size());
    std::vector<cam::Cam> maps(idx.size());
    parallel_for(idx.size(), cx.workers(), [&](std::size_t k) {
      const auto& img = ts.images[idx[k]];
      const auto& e = ts.entries[idx[k]];
      const auto b = backend.infer(img);
      maps[k] = cam::upsample(cam::compute_cam(method, b), img.dim(1), img.dim(2));
      json r{{"id", e.id}, {"probability", b.school_probability()}, {"degenerate", maps[k].degenerate}};
      if (!maps[k].degenerate) {
        const auto i = cam::argmax_index(maps[k].values);
        const double px = static_cast<double>(i % maps[k].width()), py = static_cast<double>(i / maps[k].width());
        r["peak_px"] = px;
        r["peak_py"] = py;
        if (e.cx >= 0.0) r["distance_px"] = std::hypot(px - e.cx, py - e.cy);
      }
      rows[k] = std::move(r);
    });
    fs::create_directories(dir / "maps");
    std::size_t located = 0, within = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      png::write_gray8(maps[k].values, (dir / "maps" / (ts.entries[idx[k]].id + ".png")).string());
      if (rows[k].contains("distance_px")) {
        ++located;
        within += rows[k]["distance_px"].get<double>() <= 8.0;
      }
    }
    json j{{"method", std::string(cam::to_string(method))},
           {"split", std::string(split::to_string(which))},
           {"positives", idx.size()},
           {"located", located},
           {"within_8px", within},
           {"rows", rows}};
    geojson::write_file((dir / "cam.json").string(), j);
    cx.log.info("cam", "peaks", {{"positives", idx.size()}, {"within_8px", within}});
  });
}

inline StageOutcome road_eval(const Context& cx) {
  const auto& c = cx.config;
  const auto train_dir = c.require_path("inputs.train");
  return cx.runner.run({"road-eval", {train_dir, detail::model_dir(cx)}, c.parameters({"road.", "seed"})},
                       [&](const fs::path& dir) {
    roadeval::PerturbationConfig pc;
    pc.top_fraction = c.real("road.top_fraction");
    pc.noise_std = c.real("road.noise_std");
    pc.edge_density_threshold = c.real("road.edge_density_threshold");
    pc.seed = cx.seed();
    const auto methods = detail::methods_list(c.str("road.methods"));
    const auto limit = c.integer("road.images");
    if (limit < 0) throw ConfigError("road.images must be non-negative");
    const auto ts = tileset::read_tileset(train_dir);
    std::vector<Tensor> images;
    std::vector<std::string> ids;
    for (auto i : ts.indices(split::Split::test)) {
      if (limit && images.size() == static_cast<std::size_t>(limit)) break;
      images.push_back(ts.images[i]);
      ids.push_back(ts.entries[i].id);
    }
    const auto backend = detail::load_backend(cx);
    const auto rep = roadeval::evaluate_methods(images, ids, backend, methods, pc,
                                                c.boolean("road.random_baseline"), cx.workers());
    geojson::write_file((dir / "road.json").string(), roadeval::to_json(rep, pc));
    detail::write_text(dir / "road.txt", roadeval::render_table(rep));
    for (const auto& m : rep.methods) {
      cx.log.info("road-eval", "method", {{"method", m.method}, {"mean_drop", m.mean_drop}, {"degenerate", m.degenerate}});
    }
  });
}

// --- nationwide --------------------------------------------------------------------

inline StageOutcome tiles(const Context& cx) {
  const auto& c = cx.config;
  const auto boundary = c.require_path("inputs.boundary");
  auto inputs = detail::settlement_paths(c);
  const auto rasters = inputs;
  inputs.push_back(boundary);
  return cx.runner.run({"tiles", inputs, c.parameters({"tiles."})}, [&](const fs::path& dir) {
    nationwide::TilingConfig tc;
    tc.size_m = c.real("tiles.size_m");
    tc.overlap = c.real("tiles.overlap");
    tc.px = static_cast<int>(c.integer("tiles.px"));
    tc.validate();
    const auto polys = geojson::parse_polygons(geojson::read_file(boundary.string()));
    const auto grid = nationwide::generate_tiles(polys, tc);
    const auto grids = detail::read_rasters(rasters);
    const auto pf = nationwide::prefilter_tiles(grid, grids);
    geojson::write_file((dir / "tiles.geojson").string(), nationwide::tiles_to_geojson(grid, pf.kept));
    const json counts{{"lattice", static_cast<std::size_t>(grid.rows) * grid.cols},
                      {"in_boundary", grid.tiles.size()},
                      {"settled", pf.kept.size()}};
    geojson::write_file((dir / "counts.json").string(), counts);
    cx.log.info("tiles", "counts", counts);
  });
}

inline StageOutcome sweep(const Context& cx) {
  const auto& c = cx.config;
  const auto tiles = cx.out("tiles", "tiles.geojson");
  const auto images = c.require_path("inputs.images");
  std::vector<fs::path> inputs{tiles, images, detail::model_dir(cx)};
  if (c.str("sweep.tau") == "auto") inputs.push_back(cx.out("metrics", "metrics.json"));
  return cx.runner.run({"sweep", inputs, c.parameters({"sweep.", "cam.method"})}, [&](const fs::path& dir) {
    nationwide::SweepConfig sc;
    sc.tau = detail::sweep_tau(cx);
    sc.method = cam::parse_method(c.str("cam.method"));
    sc.workers = cx.workers();
    const auto ts = nationwide::tiles_from_geojson(geojson::read_file(tiles.string()));
    const nationwide::DirectoryImageStore store(images);
    const auto backend = detail::load_backend(cx);
    const auto r = nationwide::sweep(ts, store, backend, sc, [&](const std::string& id, const std::string& msg) {
      cx.log.warn("sweep", msg, {{"tile_id", id}});
    });
    geojson::write_file((dir / "predictions.geojson").string(), nationwide::to_geojson(r.predictions));
    const json j{{"tau", sc.tau},
                 {"cam_method", std::string(cam::to_string(sc.method))},
                 {"model_id", backend.model_id()},
                 {"tiles", ts.size()},
                 {"scored", r.scored},
                 {"missing", r.missing.size()},
                 {"above_tau", r.predictions.size()},
                 {"fallbacks", r.fallbacks},
                 {"missing_tiles", r.missing}};
    geojson::write_file((dir / "sweep.json").string(), j);
    cx.log.info("sweep", "scored", {{"scored", r.scored}, {"above_tau", r.predictions.size()}, {"tau", sc.tau}});
  });
}

inline StageOutcome aggregate(const Context& cx) {
  const auto& c = cx.config;
  const auto preds = cx.out("sweep", "predictions.geojson");
  const auto info = cx.out("sweep", "sweep.json");
  const auto counts = cx.out("tiles", "counts.json");
  return cx.runner.run({"aggregate", {preds, info, counts}, c.parameters({"aggregate."})}, [&](const fs::path& dir) {
    nationwide::AggregationConfig ac;
    ac.buffer_r = c.real("aggregate.buffer_m");
    const auto points = nationwide::predictions_from_geojson(geojson::read_file(preds.string()));
    const auto merged = nationwide::aggregate(points, ac);
    geojson::write_file((dir / "predictions.geojson").string(), nationwide::to_geojson(merged));
    const auto s = geojson::read_file(info.string());
    const auto t = geojson::read_file(counts.string());
    nationwide::StageCounts sc;
    sc.lattice = t.at("lattice").get<std::size_t>();
    sc.in_boundary = t.at("in_boundary").get<std::size_t>();
    sc.settled = t.at("settled").get<std::size_t>();
    sc.scored = s.at("scored").get<std::size_t>();
    sc.missing = s.at("missing").get<std::size_t>();
    sc.above_tau = s.at("above_tau").get<std::size_t>();
    sc.fallbacks = s.at("fallbacks").get<std::size_t>();
    sc.aggregated = merged.size();
    geojson::write_file((dir / "run_manifest.json").string(),
                        nationwide::run_manifest(s.at("tau").get<double>(),
                                                 cam::parse_method(s.at("cam_method").get<std::string>()),
                                                 s.at("model_id").get<std::string>(), sc, ac));
    cx.log.info("aggregate", "merged", {{"before", points.size()}, {"after", merged.size()}});
  });
}

// Government school records that survived cleaning, as match targets.
inline std::vector<valsvc::GovernmentPoint> cleaned_government(const ingest::SchoolDataset& ds) {
  std::vector<valsvc::GovernmentPoint> out;
  for (const auto& r : ds.records) {
    if (r.source != ingest::Source::government || r.class_label != ingest::ClassLabel::school) continue;
    out.push_back({r.id, r.location, {{"name", r.name}, {"source", "government"}}});
  }
  return out;
}

inline json government_geojson(const std::vector<valsvc::GovernmentPoint>& gs) {
  std::vector<json> fs;
  for (const auto& g : gs) {
    auto props = g.properties;
    props["id"] = g.id;
    fs.push_back(geojson::point_feature(g.location, std::move(props)));
  }
  return geojson::feature_collection(std::move(fs));
}

inline StageOutcome match(const Context& cx) {
  const auto& c = cx.config;
  const auto preds = cx.out("aggregate", "predictions.geojson");
  const auto info = cx.out("sweep", "sweep.json");
  const auto dataset = cx.out("ingest", "dataset.geojson");
  return cx.runner.run({"match", {preds, info, dataset}, c.parameters({"match."})}, [&](const fs::path& dir) {
    valsvc::MatchConfig mc;
    mc.tau = geojson::read_file(info.string()).at("tau").get<double>();
    mc.d = c.real("match.d_m");
    mc.validate();
    const auto ps = valsvc::predictions_from_geojson(geojson::read_file(preds.string()));
    const auto gov = cleaned_government(ingest::dataset_from_geojson(geojson::read_file(dataset.string())));
    const auto filtered = valsvc::filter_predictions(ps, mc.tau);
    const auto m = valsvc::match(filtered, gov, mc.d);
    auto stats = valsvc::to_json(valsvc::venn_stats(m));
    stats["tau"] = mc.tau;
    stats["d"] = mc.d;
    geojson::write_file((dir / "stats.json").string(), stats);
    json pairs = json::array();
    std::map<std::string, const valsvc::MatchPair*> by_pred;
    for (const auto& p : m.pairs) {
      pairs.push_back({{"prediction_id", p.prediction_id}, {"government_id", p.government_id}, {"distance_m", p.distance_m}});
      by_pred[p.prediction_id] = &p;
    }
    geojson::write_file((dir / "pairs.json").string(),
                        {{"pairs", pairs}, {"unmatched_predictions", m.unmatched_predictions},
                         {"unmatched_government", m.unmatched_government}});
    std::vector<json> fs;
    for (const auto& p : filtered) {
      auto props = p.properties;
      props["id"] = p.id;
      const auto it = by_pred.find(p.id);
      props["match_status"] = it == by_pred.end() ? "unmatched" : "matched";
      props["matched_government_id"] = it == by_pred.end() ? json(nullptr) : json(it->second->government_id);
      props["match_distance_m"] = it == by_pred.end() ? json(nullptr) : json(it->second->distance_m);
      fs.push_back(geojson::point_feature(p.location, std::move(props)));
    }
    geojson::write_file((dir / "predictions.geojson").string(), geojson::feature_collection(std::move(fs)));
    geojson::write_file((dir / "government_cleaned.geojson").string(), government_geojson(gov));
    cx.log.info("match", "venn", stats);
  });
}

// --- registry --------------------------------------------------------------------------

using StageFn = std::function<StageOutcome(const Context&)>;

// Pipeline order; `run` executes them in sequence.
inline const std::vector<std::pair<std::string, StageFn>>& registry() {
  static const std::vector<std::pair<std::string, StageFn>> r{
      {"ingest", ingest},      {"split", split},       {"train-toy", train_toy}, {"lr-find", lr_find},
      {"infer", infer},        {"metrics", metrics},   {"cam", cam_maps},        {"road-eval", road_eval},
      {"tiles", tiles},        {"sweep", sweep},       {"aggregate", aggregate}, {"match", match},
  };
  return r;
}

inline const StageFn& find(const std::string& name) {
  for (const auto& [n, f] : registry())
    if (n == name) return f;
  throw ConfigError("unknown stage '" + name + "'");
}

}  // namespace schoolmap::stages
