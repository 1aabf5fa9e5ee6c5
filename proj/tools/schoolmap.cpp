// schoolmap: runs the mapping pipeline stage by stage from one config file.
//
//   schoolmap <stage> -c pipeline.conf [--set key=value ...] [--force]
//   schoolmap run -c pipeline.conf          every stage except lr-find, in order
//   schoolmap serve -c pipeline.conf [--dry-run]
//   schoolmap config [-c pipeline.conf]     effective config with key docs
//   schoolmap synth --out DIR               write a synthetic fixture country
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 internal error.
// Logs are JSON lines on stderr; each stage prints one summary line on stdout.

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "schoolmap/error.hpp"
#include "schoolmap/fixture.hpp"
#include "schoolmap/pipeline.hpp"
#include "schoolmap/stages.hpp"
// httplib pulls in <resolv.h>, whose `_res` macro breaks Eigen; keep it last.
#include "schoolmap/valsvc_http.hpp"

namespace fs = std::filesystem;
using namespace schoolmap;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kInternal = 4 };

struct Options {
  std::string config;
  std::vector<std::string> sets;
  bool force = false;
};

pipeline::Config load_config(const Options& o) {
  auto c = o.config.empty() ? pipeline::Config() : pipeline::Config::load(o.config);
  for (const auto& s : o.sets) c.set_line(s);
  return c;
}

void print_outcome(const std::string& stage, const pipeline::StageOutcome& r) {
  std::cout << stage << ": " << (r.up_to_date ? "up to date" : "done") << " (" << r.dir.string() << ")\n";
}

int run_stages(const Options& o, const std::vector<std::string>& names, const pipeline::Log& log) {
  const auto cfg = load_config(o);
  const pipeline::StageRunner runner(cfg.require_path("paths.out"), log, o.force);
  const stages::Context cx{cfg, runner, log};
  for (const auto& n : names) print_outcome(n, stages::find(n)(cx));
  return kOk;
}

std::atomic<httplib::Server*> g_server{nullptr};

extern "C" void stop_server(int) {
  if (auto* s = g_server.load()) s->stop();
}

int serve(const Options& o, bool dry_run, const pipeline::Log& log) {
  const auto cfg = load_config(o);
  const pipeline::StageRunner runner(cfg.require_path("paths.out"), log);
  const stages::Context cx{cfg, runner, log};
  const auto preds_path = cx.out("aggregate", "predictions.geojson");
  const auto gov_path = cx.out("match", "government_cleaned.geojson");
  const auto sweep_path = cx.out("sweep", "sweep.json");
  for (const auto& p : {preds_path, gov_path, sweep_path}) {
    if (!fs::exists(p)) throw DataError("serve needs '" + p.string() + "'; run sweep, aggregate and match first");
  }
  // Raw government coordinates are displayed unaltered when the input is GeoJSON.
  const auto raw_path = cfg.require_path("inputs.government");
  const auto ext = raw_path.extension().string();
  const auto gov_doc = geojson::read_file(gov_path.string());
  const auto raw = (ext == ".geojson" || ext == ".json") ? geojson::read_file(raw_path.string()) : gov_doc;
  valsvc::MatchConfig mc;
  mc.tau = geojson::read_file(sweep_path.string()).at("tau").get<double>();
  mc.d = cfg.real("match.d_m");
  const auto log_path = cx.out("serve", "verdicts.jsonl");
  fs::create_directories(log_path.parent_path());
  const auto every = cfg.integer("serve.snapshot_every");
  if (every < 0) throw ConfigError("serve.snapshot_every must be non-negative");
  valsvc::Service svc(valsvc::predictions_from_geojson(geojson::read_file(preds_path.string())),
                      valsvc::government_from_geojson(gov_doc), raw, log_path, mc,
                      static_cast<std::size_t>(every));
  const auto stats = svc.get_stats({});
  if (dry_run) {
    std::cout << stats.body.dump() << "\n";
    return kOk;
  }
  httplib::Server srv;
  svc.mount(srv);
  const auto host = cfg.str("serve.host");
  const auto port = static_cast<int>(cfg.integer("serve.port"));
  if (port < 0 || port > 65535) throw ConfigError("serve.port must lie in [0, 65535]");
  const int bound = port == 0 ? srv.bind_to_any_port(host) : (srv.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw DataError("cannot listen on " + host + ":" + std::to_string(port));
  g_server = &srv;
  std::signal(SIGINT, stop_server);
  std::signal(SIGTERM, stop_server);
  log.info("serve", "listening", {{"host", host}, {"port", bound}, {"stats", stats.body}});
  std::cout << "serve: listening on http://" << host << ":" << bound << "\n" << std::flush;
  srv.listen_after_bind();
  g_server = nullptr;
  return kOk;
}

int synth(const std::string& out, const fixture::CountryConfig& cc, const pipeline::Log& log) {
  const fs::path dir = fs::absolute(out);
  const auto c = fixture::write_country(dir, cc);
  std::ostringstream conf;
  conf << "# Synthetic fixture country written by `schoolmap synth`.\n"
       << "country.code = " << cc.code << "\n"
       << "seed = " << cc.seed << "\n"
       << "paths.out = out\n"
       << "inputs.government = government.geojson\n"
       << "inputs.osm = osm.csv\n"
       << "inputs.settlement = settlement.asc\n"
       << "inputs.smod = settlement.asc\n"
       << "inputs.boundary = boundary.geojson\n"
       << "inputs.images = images\n"
       << "inputs.train = train\n"
       << "tiles.size_m = " << cc.tiling.size_m << "\n"
       << "tiles.px = " << cc.tiling.px << "\n";
  std::ofstream(dir / "pipeline.conf", std::ios::binary) << conf.str();
  log.info("synth", "fixture written", {{"dir", dir.string()}, {"schools", c.schools.size()},
                                        {"imaged_tiles", c.imaged.size()}, {"train_tiles", cc.train_tiles}});
  std::cout << "synth: done (" << dir.string() << ")\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  const pipeline::Log log;
  CLI::App app{"schoolmap: school mapping pipeline"};
  app.require_subcommand(1);
  Options opt;
  auto add_common = [&](CLI::App* sub, bool force) {
    sub->add_option("-c,--config", opt.config, "pipeline config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--set", opt.sets, "override a config key: key=value");
    if (force) sub->add_flag("--force", opt.force, "rerun even if up to date");
  };
  std::vector<std::pair<std::string, CLI::App*>> stage_cmds;
  for (const auto& [name, fn] : stages::registry()) {
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    add_common(sub, true);
    stage_cmds.emplace_back(name, sub);
  }
  auto* run = app.add_subcommand("run", "run every stage except lr-find in order");
  add_common(run, true);

  bool dry_run = false;
  auto* srv = app.add_subcommand("serve", "serve predictions, matches and verdicts over HTTP");
  add_common(srv, false);
  srv->add_flag("--dry-run", dry_run, "load everything, print /stats and exit");

  auto* conf = app.add_subcommand("config", "print the effective config with key docs");
  conf->add_option("-c,--config", opt.config, "pipeline config file")->check(CLI::ExistingFile);
  conf->add_option("--set", opt.sets, "override a config key: key=value");

  std::string synth_out;
  fixture::CountryConfig cc;
  auto* syn = app.add_subcommand("synth", "write a synthetic fixture country and its pipeline.conf");
  syn->add_option("-o,--out", synth_out, "output directory")->required();
  syn->add_option("--seed", cc.seed, "fixture seed");
  syn->add_option("--schools", cc.schools, "planted schools");
  syn->add_option("--train-tiles", cc.train_tiles, "labeled training tiles");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  std::string stage = "cli";
  try {
    for (const auto& [name, sub] : stage_cmds) {
      if (sub->parsed()) return stage = name, run_stages(opt, {name}, log);
    }
    if (run->parsed()) {
      std::vector<std::string> names;
      for (const auto& [n, fn] : stages::registry())
        if (n != "lr-find") names.push_back(n);
      return stage = "run", run_stages(opt, names, log);
    }
    if (srv->parsed()) return stage = "serve", serve(opt, dry_run, log);
    if (conf->parsed()) {
      std::cout << pipeline::render_config(load_config(opt));
      return kOk;
    }
    if (syn->parsed()) return stage = "synth", synth(synth_out, cc, log);
  } catch (const ConfigError& e) {
    log.error(stage, e.what(), {{"kind", "config"}});
    return kConfig;
  } catch (const DataError& e) {
    log.error(stage, e.what(), {{"kind", "data"}});
    return kData;
  } catch (const std::exception& e) {
    log.error(stage, e.what(), {{"kind", "internal"}});
    return kInternal;
  }
  return kInternal;
}
