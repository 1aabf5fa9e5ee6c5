#pragma once

// Pipeline plumbing: a flat key = value config with a fixed schema,
// content hashing, per-stage manifests for skip-if-unchanged reruns,
// staged output directories, and JSON-line logging.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "schoolmap/error.hpp"

namespace schoolmap::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kVersion = "1.0.0";

// --- config schema ----------------------------------------------------------

enum class KeyType { string, path, paths, integer, real, boolean };

struct KeySpec {
  const char* key;
  KeyType type;
  const char* fallback;
  const char* doc;
};

// Order here is the order of `schoolmap config` output.
inline const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> s{
      {"country.code", KeyType::string, "SYN", "country code recorded in provenance"},
      {"seed", KeyType::integer, "0", "seed for every stochastic stage"},
      {"workers", KeyType::integer, "1", "threads for tile-parallel stages"},
      {"paths.out", KeyType::path, "out", "output root; one directory per stage"},
      {"inputs.government", KeyType::path, "", "government school points (GeoJSON or CSV)"},
      {"inputs.osm", KeyType::path, "", "OSM points (GeoJSON or CSV), optional"},
      {"inputs.overture", KeyType::path, "", "Overture points (GeoJSON or CSV), optional"},
      {"inputs.settlement", KeyType::paths, "", "settlement rasters (ESRI ASCII), comma separated"},
      {"inputs.smod", KeyType::path, "", "SMOD raster for urban/rural strata"},
      {"inputs.exclusion_rules", KeyType::path, "", "keyword rules file; empty = built-in lists"},
      {"inputs.boundary", KeyType::path, "", "country boundary (Polygon/MultiPolygon GeoJSON)"},
      {"inputs.images", KeyType::path, "", "tile image store: <dir>/<tile id>.gten"},
      {"inputs.train", KeyType::path, "", "labeled tile set: labels.csv + <id>.gten"},
      {"ingest.dedup_buffer_m", KeyType::real, "150", "buffer radius for duplicate clustering"},
      {"ingest.settlement_buffer_m", KeyType::real, "150", "settlement search radius"},
      {"ingest.negative_ratio", KeyType::real, "2", "non-schools per school"},
      {"ingest.negative_min_spacing_m", KeyType::real, "300", "spacing between sampled negatives"},
      {"ingest.negative_min_school_dist_m", KeyType::real, "300", "negative-to-school distance"},
      {"split.train", KeyType::real, "0.8", "train fraction"},
      {"split.val", KeyType::real, "0.1", "validation fraction"},
      {"split.test", KeyType::real, "0.1", "test fraction"},
      {"split.min_spacing_m", KeyType::real, "300", "cross-split minimum distance"},
      {"train.batch_size", KeyType::integer, "32", "minibatch size"},
      {"train.max_epochs", KeyType::integer, "60", "epoch cap"},
      {"train.label_smoothing", KeyType::real, "0.1", "cross-entropy label smoothing"},
      {"train.initial_lr", KeyType::real, "1e-3", "Adam learning rate at epoch 1"},
      {"train.plateau_factor", KeyType::real, "0.1", "LR decay on validation plateau"},
      {"train.plateau_patience", KeyType::integer, "7", "epochs without improvement before decay"},
      {"train.early_stop_lr", KeyType::real, "1e-7", "stop once the LR falls below this"},
      {"train.augment", KeyType::boolean, "true", "rotation/flip/color augmentation"},
      {"lrfind.lr_min", KeyType::real, "1e-6", "LR range test start"},
      {"lrfind.lr_max", KeyType::real, "1e-3", "LR range test end"},
      {"lrfind.iterations", KeyType::integer, "1000", "LR range test steps"},
      {"metrics.beta", KeyType::real, "2", "F-beta used to pick tau*"},
      {"cam.method", KeyType::string, "gradcam", "CAM method for cam and sweep"},
      {"cam.split", KeyType::string, "test", "tile-set split rendered by the cam stage"},
      {"road.top_fraction", KeyType::real, "0.1", "MoRF fraction q of pixels removed"},
      {"road.noise_std", KeyType::real, "0.01", "imputation noise on [0,1] channels"},
      {"road.edge_density_threshold", KeyType::real, "0.01", "degenerate imputation edge density"},
      {"road.methods", KeyType::string, "gradcam,gradcam_pp,hirescam,eigencam,layercam",
       "comma-separated CAM methods to evaluate"},
      {"road.images", KeyType::integer, "200", "test images evaluated (0 = all)"},
      {"road.random_baseline", KeyType::boolean, "true", "include the random-mask baseline"},
      {"tiles.size_m", KeyType::real, "300", "tile edge in projected meters"},
      {"tiles.overlap", KeyType::real, "0.5", "fractional overlap of neighboring tiles"},
      {"tiles.px", KeyType::integer, "500", "tile edge in pixels"},
      {"sweep.tau", KeyType::string, "auto", "decision threshold; auto = tau* from metrics"},
      {"aggregate.buffer_m", KeyType::real, "50", "buffer radius for merging predictions"},
      {"match.d_m", KeyType::real, "250", "maximum prediction-to-record match distance"},
      {"serve.host", KeyType::string, "127.0.0.1", "listen address"},
      {"serve.port", KeyType::integer, "8080", "listen port"},
      {"serve.snapshot_every", KeyType::integer, "256", "verdict appends between snapshots"},
  };
  return s;
}

inline const KeySpec* find_key(std::string_view key) {
  for (const auto& k : schema())
    if (key == k.key) return &k;
  return nullptr;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

class Config {
 public:
  // Relative paths resolve against `base`.
  explicit Config(fs::path base = fs::current_path()) : base_(std::move(base)) {}

  static Config load(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot open config '" + file.string() + "'");
    Config c(fs::absolute(file).parent_path());
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
      const auto t = trim(line);
      if (t.empty() || t[0] == '#') continue;
      try {
        c.set_line(t);
      } catch (const ConfigError& e) {
        throw ConfigError(file.string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
    return c;
  }

  // `key = value` or `key=value`.
  void set_line(std::string_view line) {
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("expected key = value, got '" + std::string(line) + "'");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }

  void set(const std::string& key, const std::string& value) {
    const auto* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    check(*spec, value);
    values_[key] = value;
  }

  const fs::path& base() const { return base_; }

  std::string raw(const std::string& key) const {
    const auto* spec = find_key(key);
    if (!spec) throw ConfigError("unknown config key '" + key + "'");
    const auto it = values_.find(key);
    return it == values_.end() ? std::string(spec->fallback) : it->second;
  }

  std::string str(const std::string& key) const { return raw(key); }

  double real(const std::string& key) const { return parse_real(key, raw(key)); }

  long long integer(const std::string& key) const { return parse_integer(key, raw(key)); }

  bool boolean(const std::string& key) const { return parse_bool(key, raw(key)); }

  std::optional<fs::path> path(const std::string& key) const {
    const auto v = raw(key);
    if (v.empty()) return std::nullopt;
    return resolve(v);
  }

  fs::path require_path(const std::string& key) const {
    const auto p = path(key);
    if (!p) throw ConfigError("config key '" + key + "' must be set");
    return *p;
  }

  std::vector<fs::path> paths(const std::string& key) const {
    std::vector<fs::path> out;
    for (const auto& part : split_list(raw(key))) out.push_back(resolve(part));
    return out;
  }

  // Effective values for keys starting with any prefix, for manifests.
  json parameters(std::initializer_list<std::string_view> prefixes) const {
    json j = json::object();
    for (const auto& k : schema()) {
      const std::string_view key = k.key;
      for (auto p : prefixes) {
        if (key.substr(0, p.size()) == p) {
          j[k.key] = raw(k.key);
          break;
        }
      }
    }
    return j;
  }

  static std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= v.size()) {
      auto comma = v.find(',', start);
      if (comma == std::string::npos) comma = v.size();
      auto part = trim(std::string_view(v).substr(start, comma - start));
      if (!part.empty()) out.push_back(std::move(part));
      start = comma + 1;
    }
    return out;
  }

 private:
  fs::path resolve(const std::string& v) const {
    const fs::path p(v);
    return (p.is_absolute() ? p : base_ / p).lexically_normal();
  }

  static double parse_real(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used == v.size() && std::isfinite(d)) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' must be a number, got '" + v + "'");
  }

  static long long parse_integer(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const long long i = std::stoll(v, &used);
      if (used == v.size()) return i;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' must be an integer, got '" + v + "'");
  }

  static bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' must be true or false, got '" + v + "'");
  }

  static void check(const KeySpec& s, const std::string& v) {
    switch (s.type) {
      case KeyType::integer: parse_integer(s.key, v); break;
      case KeyType::real: parse_real(s.key, v); break;
      case KeyType::boolean: parse_bool(s.key, v); break;
      default: break;
    }
  }

  fs::path base_;
  std::map<std::string, std::string> values_;
};

inline std::string render_config(const Config& c) {
  std::ostringstream os;
  for (const auto& k : schema()) os << "# " << k.doc << "\n" << k.key << " = " << c.raw(k.key) << "\n";
  return os.str();
}

// --- hashing ------------------------------------------------------------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::uint64_t hash_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read '" + p.string() + "'");
  std::uint64_t h = kFnvOffset;
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

// Directories hash their sorted relative paths and file contents.
inline std::string content_hash(const fs::path& p) {
  if (fs::is_regular_file(p)) return hex64(hash_file(p));
  if (!fs::is_directory(p)) throw DataError("input '" + p.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(p))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    h = fnv1a(fs::relative(f, p).generic_string(), h);
    h = fnv1a(hex64(hash_file(f)), h);
  }
  return hex64(h);
}

// --- logging ---------------------------------------------------------------------

class Log {
 public:
  explicit Log(std::ostream& out = std::cerr) : out_(&out) {}

  void operator()(const std::string& level, const std::string& stage, const std::string& msg,
                  json fields = json::object()) const {
    json line{{"ts", now()}, {"level", level}, {"stage", stage}, {"msg", msg}};
    for (auto& [k, v] : fields.items()) line[k] = v;
    std::lock_guard lock(mu_);
    *out_ << line.dump() << "\n" << std::flush;
  }

  void info(const std::string& stage, const std::string& msg, json fields = json::object()) const {
    (*this)("info", stage, msg, std::move(fields));
  }
  void warn(const std::string& stage, const std::string& msg, json fields = json::object()) const {
    (*this)("warn", stage, msg, std::move(fields));
  }
  void error(const std::string& stage, const std::string& msg, json fields = json::object()) const {
    (*this)("error", stage, msg, std::move(fields));
  }

 private:
  static std::string now() {
    const auto t = std::chrono::system_clock::now();
    const auto secs = std::chrono::system_clock::to_time_t(t);
    const auto ms =
        std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
  }

  std::ostream* out_;
  mutable std::mutex mu_;
};

// --- manifests and staging ---------------------------------------------------------

struct Manifest {
  std::string stage;
  std::string version = kVersion;
  json inputs = json::object();      // path -> content hash
  json parameters = json::object();
  json outputs = json::object();     // relative path -> content hash

  json to_json() const {
    return {{"stage", stage}, {"version", version}, {"inputs", inputs},
            {"parameters", parameters}, {"outputs", outputs}};
  }

  static Manifest from_json(const json& j) {
    Manifest m;
    m.stage = j.at("stage").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.inputs = j.at("inputs");
    m.parameters = j.at("parameters");
    m.outputs = j.at("outputs");
    return m;
  }
};

inline constexpr const char* kManifestName = "manifest.json";

struct StageSpec {
  std::string name;
  std::vector<fs::path> inputs;  // must exist at stage start
  json parameters = json::object();
};

struct StageOutcome {
  bool up_to_date = false;
  fs::path dir;
  Manifest manifest;
};

// Runs `work(staging_dir)` unless the stage directory holds a manifest with
// the same inputs, parameters and intact outputs. Outputs are written to a
// staging directory and swapped in only on success.
class StageRunner {
 public:
  StageRunner(fs::path out_root, const Log& log, bool force = false)
      : root_(std::move(out_root)), log_(log), force_(force) {}

  const fs::path& root() const { return root_; }
  fs::path dir(const std::string& stage) const { return root_ / stage; }

  StageOutcome run(const StageSpec& spec, const std::function<void(const fs::path&)>& work) const {
    Manifest m;
    m.stage = spec.name;
    m.parameters = spec.parameters;
    for (const auto& in : spec.inputs) {
      if (!fs::exists(in)) {
        throw DataError("stage " + spec.name + ": input '" + in.string() +
                        "' does not exist; run the stage that produces it or fix the config");
      }
      m.inputs[in.generic_string()] = content_hash(in);
    }
    const fs::path target = dir(spec.name);
    if (!force_) {
      if (const auto prev = current(target); prev && prev->version == m.version &&
                                             prev->inputs == m.inputs && prev->parameters == m.parameters) {
        log_.info(spec.name, "up to date", {{"dir", target.string()}});
        return {true, target, *prev};
      }
    }
    fs::create_directories(root_);
    const fs::path staging = root_ / ("." + spec.name + ".staging");
    fs::remove_all(staging);
    fs::create_directories(staging);
    try {
      work(staging);
      for (const auto& e : fs::recursive_directory_iterator(staging)) {
        if (!e.is_regular_file()) continue;
        m.outputs[fs::relative(e.path(), staging).generic_string()] = hex64(hash_file(e.path()));
      }
      std::ofstream(staging / kManifestName, std::ios::binary) << m.to_json().dump(2) << "\n";
      fs::remove_all(target);
      fs::rename(staging, target);
    } catch (...) {
      std::error_code ec;
      fs::remove_all(staging, ec);
      throw;
    }
    log_.info(spec.name, "done", {{"dir", target.string()}, {"outputs", m.outputs.size()}});
    return {false, target, m};
  }

  // The manifest of a completed stage whose outputs are intact.
  static std::optional<Manifest> current(const fs::path& stage_dir) {
    const auto mpath = stage_dir / kManifestName;
    if (!fs::exists(mpath)) return std::nullopt;
    Manifest m;
    try {
      std::ifstream in(mpath);
      m = Manifest::from_json(json::parse(in));
    } catch (const std::exception&) {
      return std::nullopt;
    }
    for (const auto& [rel, h] : m.outputs.items()) {
      const auto p = stage_dir / rel;
      if (!fs::is_regular_file(p) || hex64(hash_file(p)) != h.get<std::string>()) return std::nullopt;
    }
    return m;
  }

 private:
  fs::path root_;
  const Log& log_;
  bool force_;
};

}  // namespace schoolmap::pipeline
