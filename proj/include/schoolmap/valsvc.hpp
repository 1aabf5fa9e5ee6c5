#pragma once

// Matching of predicted schools against government records and the verdict
// log behind the human validation workflow.
//
// Matching is greedy one-to-one: every cross pair within d is sorted by
// (distance, prediction id, government id) and accepted iff both sides are
// still free. Predictions are filtered strictly by probability > tau first.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "schoolmap/error.hpp"
#include "schoolmap/geo.hpp"
#include "schoolmap/geojson.hpp"

namespace schoolmap::valsvc {

using nlohmann::json;

struct Prediction {
  std::string id;
  geo::GeoPoint location;
  double probability = 0.0;
  json properties = json::object();  // as loaded
};

struct GovernmentPoint {
  std::string id;
  geo::GeoPoint location;
  json properties = json::object();
};

struct MatchConfig {
  double tau = 0.5;
  double d = 250.0;

  void validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
    if (!(d > 0.0) || !std::isfinite(d)) throw ConfigError("distance threshold must be positive");
  }
};

struct MatchPair {
  std::string prediction_id;
  std::string government_id;
  double distance_m = 0.0;

  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;  // acceptance order
  std::vector<std::string> unmatched_predictions;  // input order
  std::vector<std::string> unmatched_government;   // input order
};

inline std::vector<Prediction> filter_predictions(std::span<const Prediction> preds, double tau) {
  std::vector<Prediction> out;
  for (const auto& p : preds)
    if (p.probability > tau) out.push_back(p);
  return out;
}

// Cross pairs with distance <= d, via a latitude window on the government
// side.
inline std::vector<MatchPair> candidate_pairs(std::span<const Prediction> preds,
                                              std::span<const GovernmentPoint> gov, double d) {
  std::vector<std::size_t> order(gov.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return gov[a].location.lat < gov[b].location.lat; });
  std::vector<double> lats;
  for (std::size_t i : order) lats.push_back(gov[i].location.lat);
  // The latitude gap bounds distance from below; pad by a part in 1e9.
  const double dlat = geo::to_degrees(d / geo::kEarthRadiusM) * (1 + 1e-9);
  std::vector<MatchPair> out;
  for (const auto& p : preds) {
    auto lo = std::lower_bound(lats.begin(), lats.end(), p.location.lat - dlat);
    auto hi = std::upper_bound(lats.begin(), lats.end(), p.location.lat + dlat);
    for (auto it = lo; it != hi; ++it) {
      const auto& g = gov[order[static_cast<std::size_t>(it - lats.begin())]];
      const double dist = geo::haversine_distance(p.location, g.location);
      if (dist <= d) out.push_back({p.id, g.id, dist});
    }
  }
  return out;
}

inline MatchResult match(std::span<const Prediction> preds, std::span<const GovernmentPoint> gov, double d) {
  if (!(d > 0.0)) throw ConfigError("distance threshold must be positive");
  auto cands = candidate_pairs(preds, gov, d);
  std::sort(cands.begin(), cands.end(), [](const MatchPair& a, const MatchPair& b) {
    if (a.distance_m != b.distance_m) return a.distance_m < b.distance_m;
    if (a.prediction_id != b.prediction_id) return a.prediction_id < b.prediction_id;
    return a.government_id < b.government_id;
  });
  std::unordered_set<std::string> used_p, used_g;
  MatchResult r;
  for (auto& c : cands) {
    if (used_p.count(c.prediction_id) || used_g.count(c.government_id)) continue;
    used_p.insert(c.prediction_id);
    used_g.insert(c.government_id);
    r.pairs.push_back(std::move(c));
  }
  for (const auto& p : preds)
    if (!used_p.count(p.id)) r.unmatched_predictions.push_back(p.id);
  for (const auto& g : gov)
    if (!used_g.count(g.id)) r.unmatched_government.push_back(g.id);
  return r;
}

struct VennStats {
  std::size_t matched = 0;
  std::size_t unmatched_government = 0;
  std::size_t unmatched_predictions = 0;

  std::size_t government_total() const { return matched + unmatched_government; }
  std::size_t prediction_total() const { return matched + unmatched_predictions; }

  friend bool operator==(const VennStats&, const VennStats&) = default;
};

inline VennStats venn_stats(const MatchResult& r) {
  return {r.pairs.size(), r.unmatched_government.size(), r.unmatched_predictions.size()};
}

inline json to_json(const VennStats& v) {
  return {{"matched", v.matched},
          {"unmatched_government", v.unmatched_government},
          {"unmatched_predictions", v.unmatched_predictions},
          {"government_total", v.government_total()},
          {"prediction_total", v.prediction_total()}};
}

// --- loading ----------------------------------------------------------------------

namespace detail {

inline std::string feature_id(const json& props, const char* fallback_key, std::size_t index) {
  for (const char* key : {"id", fallback_key}) {
    if (!key || !props.contains(key)) continue;
    const auto& v = props.at(key);
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<long long>());
  }
  throw DataError("feature " + std::to_string(index) + " has no id");
}

inline geo::GeoPoint point_of(const json& f, std::size_t index) {
  const auto& g = f.at("geometry");
  if (g.value("type", "") != "Point") throw DataError("feature " + std::to_string(index) + " is not a Point");
  const auto& c = g.at("coordinates");
  const geo::GeoPoint p{c.at(1).get<double>(), c.at(0).get<double>()};
  if (!geo::is_valid(p)) throw DataError("feature " + std::to_string(index) + " has invalid coordinates");
  return p;
}

inline const json& features_of(const json& doc) {
  if (doc.value("type", "") != "FeatureCollection" || !doc.contains("features")) {
    throw DataError("expected a GeoJSON FeatureCollection");
  }
  return doc.at("features");
}

}  // namespace detail

// Ids come from properties.id, else properties.tile_id.
inline std::vector<Prediction> predictions_from_geojson(const json& doc) {
  std::vector<Prediction> out;
  std::unordered_set<std::string> seen;
  try {
    for (const auto& f : detail::features_of(doc)) {
      const auto i = out.size();
      Prediction p;
      p.properties = f.value("properties", json::object());
      p.id = detail::feature_id(p.properties, "tile_id", i);
      p.location = detail::point_of(f, i);
      p.probability = p.properties.at("probability").get<double>();
      if (!(p.probability >= 0.0 && p.probability <= 1.0)) {
        throw DataError("prediction '" + p.id + "' has probability outside [0, 1]");
      }
      if (!seen.insert(p.id).second) throw DataError("duplicate prediction id '" + p.id + "'");
      out.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("predictions: ") + e.what());
  }
  return out;
}

inline std::vector<GovernmentPoint> government_from_geojson(const json& doc) {
  std::vector<GovernmentPoint> out;
  std::unordered_set<std::string> seen;
  try {
    for (const auto& f : detail::features_of(doc)) {
      const auto i = out.size();
      GovernmentPoint g;
      g.properties = f.value("properties", json::object());
      g.id = detail::feature_id(g.properties, nullptr, i);
      g.location = detail::point_of(f, i);
      if (!seen.insert(g.id).second) throw DataError("duplicate government id '" + g.id + "'");
      out.push_back(std::move(g));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("government points: ") + e.what());
  }
  return out;
}

// --- verdicts ---------------------------------------------------------------------

enum class Decision { approved, rejected, relocated };

inline std::string to_string(Decision d) {
  switch (d) {
    case Decision::approved: return "approved";
    case Decision::rejected: return "rejected";
    case Decision::relocated: return "relocated";
  }
  return "?";
}

struct Verdict {
  std::string prediction_id;
  Decision decision = Decision::approved;
  std::optional<geo::GeoPoint> corrected_location;  // iff relocated
  std::string validator_id;
  std::string timestamp;  // UTC ISO 8601
  long long revision = 1;

  // Equal apart from the timestamp.
  bool same_content(const Verdict& o) const {
    return prediction_id == o.prediction_id && decision == o.decision &&
           corrected_location == o.corrected_location && validator_id == o.validator_id &&
           revision == o.revision;
  }
};

// Maps to HTTP 400, 404 and 409.
class VerdictError : public DataError {
 public:
  enum class Code { invalid, unknown_prediction, conflict };
  VerdictError(Code code, const std::string& what) : DataError(what), code_(code) {}
  Code code() const noexcept { return code_; }

 private:
  Code code_;
};

inline json to_json(const Verdict& v) {
  json j{{"prediction_id", v.prediction_id},
         {"decision", to_string(v.decision)},
         {"validator_id", v.validator_id},
         {"timestamp", v.timestamp},
         {"revision", v.revision}};
  j["corrected_location"] =
      v.corrected_location ? json{{"lat", v.corrected_location->lat}, {"lon", v.corrected_location->lon}}
                           : json(nullptr);
  return j;
}

inline Verdict verdict_from_json(const json& j) {
  using Code = VerdictError::Code;
  if (!j.is_object()) throw VerdictError(Code::invalid, "verdict must be a JSON object");
  Verdict v;
  try {
    v.prediction_id = j.at("prediction_id").get<std::string>();
    const auto d = j.at("decision").get<std::string>();
    if (d == "approved") v.decision = Decision::approved;
    else if (d == "rejected") v.decision = Decision::rejected;
    else if (d == "relocated") v.decision = Decision::relocated;
    else throw VerdictError(Code::invalid, "unknown decision '" + d + "'");
    v.validator_id = j.value("validator_id", std::string());
    v.timestamp = j.value("timestamp", std::string());
    v.revision = j.value("revision", 1LL);
    if (j.contains("corrected_location") && !j.at("corrected_location").is_null()) {
      const auto& c = j.at("corrected_location");
      v.corrected_location = geo::GeoPoint{c.at("lat").get<double>(), c.at("lon").get<double>()};
    }
  } catch (const json::exception& e) {
    throw VerdictError(Code::invalid, std::string("malformed verdict: ") + e.what());
  }
  return v;
}

inline std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct RecordOutcome {
  Verdict verdict;
  bool duplicate = false;  // same revision already stored; nothing appended
};

// Append-only JSON-lines log, one verdict per line, with a snapshot written
// every `snapshot_every` appends to `<log>.snapshot`. Revisions per
// (prediction, validator) start at 1 and must advance by exactly one.
class VerdictStore {
 public:
  VerdictStore(std::filesystem::path log, std::unordered_set<std::string> known_ids,
               std::size_t snapshot_every = 256)
      : log_(std::move(log)), known_(std::move(known_ids)), snapshot_every_(snapshot_every) {
    load();
    out_.open(log_, std::ios::app | std::ios::binary);
    if (!out_) throw DataError("cannot open verdict log '" + log_.string() + "' for writing");
  }

  static std::filesystem::path snapshot_path(const std::filesystem::path& log) {
    return log.string() + ".snapshot";
  }

  RecordOutcome record(Verdict v) {
    using Code = VerdictError::Code;
    if (!known_.count(v.prediction_id)) {
      throw VerdictError(Code::unknown_prediction, "unknown prediction id '" + v.prediction_id + "'");
    }
    if (v.validator_id.empty()) throw VerdictError(Code::invalid, "validator id is required");
    if (v.revision < 1) throw VerdictError(Code::invalid, "revision must be >= 1");
    if (v.decision == Decision::relocated && !v.corrected_location) {
      throw VerdictError(Code::invalid, "relocated verdict requires corrected_location");
    }
    if (v.decision != Decision::relocated && v.corrected_location) {
      throw VerdictError(Code::invalid, "corrected_location is only allowed for relocated verdicts");
    }
    if (v.corrected_location && !geo::is_valid(*v.corrected_location)) {
      throw VerdictError(Code::invalid, "corrected_location outside WGS84 range");
    }
    std::lock_guard lock(mu_);
    const auto key = v.prediction_id + '\x1f' + v.validator_id;
    const auto it = current_.find(key);
    const long long have = it == current_.end() ? 0 : verdicts_[it->second].revision;
    if (it != current_.end() && v.revision == have) {
      const auto& stored = verdicts_[it->second];
      if (stored.same_content(v)) return {stored, true};
      throw VerdictError(Code::conflict, "revision " + std::to_string(v.revision) +
                                             " already recorded with different content");
    }
    if (v.revision != have + 1) {
      throw VerdictError(Code::conflict, "stale revision " + std::to_string(v.revision) + "; current is " +
                                             std::to_string(have));
    }
    if (v.timestamp.empty()) v.timestamp = utc_now();
    out_ << to_json(v).dump() << '\n';
    out_.flush();
    if (!out_) throw DataError("write to verdict log '" + log_.string() + "' failed");
    apply(v);
    ++lines_;
    if (snapshot_every_ && ++since_snapshot_ >= snapshot_every_) write_snapshot_locked();
    return {v, false};
  }

  // Latest verdict for a prediction across validators, by log order.
  std::optional<Verdict> latest(const std::string& prediction_id) const {
    std::lock_guard lock(mu_);
    const auto it = latest_.find(prediction_id);
    if (it == latest_.end()) return std::nullopt;
    return verdicts_[it->second];
  }

  // Current revision per validator, ordered by validator id.
  std::vector<Verdict> history(const std::string& prediction_id) const {
    std::lock_guard lock(mu_);
    std::vector<Verdict> out;
    for (const auto& [key, idx] : current_) {
      if (verdicts_[idx].prediction_id == prediction_id) out.push_back(verdicts_[idx]);
    }
    std::sort(out.begin(), out.end(),
              [](const Verdict& a, const Verdict& b) { return a.validator_id < b.validator_id; });
    return out;
  }

  bool knows(const std::string& prediction_id) const { return known_.count(prediction_id) > 0; }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return lines_;
  }

  void snapshot() {
    std::lock_guard lock(mu_);
    write_snapshot_locked();
  }

 private:
  void write_snapshot_locked() {
    // Snapshot: log line count plus the current verdicts; written atomically.
    json cur = json::array();
    for (const auto& [key, idx] : current_) cur.push_back({{"order", idx}, {"verdict", to_json(verdicts_[idx])}});
    const auto tmp = snapshot_path(log_).string() + ".tmp";
    {
      std::ofstream s(tmp, std::ios::binary);
      s << json{{"lines", lines_}, {"current", cur}}.dump() << '\n';
      if (!s) throw DataError("cannot write verdict snapshot '" + tmp + "'");
    }
    std::filesystem::rename(tmp, snapshot_path(log_));
    since_snapshot_ = 0;
  }

  void apply(const Verdict& v) {
    const std::size_t idx = verdicts_.size();
    verdicts_.push_back(v);
    current_[v.prediction_id + '\x1f' + v.validator_id] = idx;
    latest_[v.prediction_id] = idx;
  }

  void load() {
    std::size_t skip = 0;
    if (std::filesystem::exists(snapshot_path(log_)) && std::filesystem::exists(log_)) {
      const auto snap = geojson::read_file(snapshot_path(log_).string());
      skip = snap.at("lines").get<std::size_t>();
      std::vector<std::pair<std::size_t, Verdict>> cur;
      for (const auto& e : snap.at("current")) cur.emplace_back(e.at("order").get<std::size_t>(), verdict_from_json(e.at("verdict")));
      std::sort(cur.begin(), cur.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      for (const auto& [order, v] : cur) apply(v);
    }
    if (!std::filesystem::exists(log_)) return;
    std::string text;
    {
      std::ifstream in(log_, std::ios::binary);
      text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    // A crash mid-append leaves a partial final line; drop it.
    const auto last_nl = text.rfind('\n');
    const std::size_t complete = last_nl == std::string::npos ? 0 : last_nl + 1;
    if (complete != text.size()) {
      std::filesystem::resize_file(log_, complete);
      text.resize(complete);
    }
    std::size_t line_no = 0, pos = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      const std::string line = text.substr(pos, nl - pos);
      pos = nl + 1;
      ++line_no;
      if (line_no <= skip) continue;
      try {
        apply(verdict_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw DataError(log_.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    if (line_no < skip) throw DataError("verdict snapshot is ahead of log '" + log_.string() + "'");
    lines_ = line_no;
  }

  std::filesystem::path log_;
  std::unordered_set<std::string> known_;
  std::size_t snapshot_every_;
  std::ofstream out_;
  mutable std::mutex mu_;
  std::vector<Verdict> verdicts_;
  std::map<std::string, std::size_t> current_;
  std::unordered_map<std::string, std::size_t> latest_;
  std::size_t lines_ = 0;
  std::size_t since_snapshot_ = 0;
};

// Approved predictions at their location, relocated ones at the corrected
// location; rejected and unreviewed ones are left out. Ordered as `preds`.
inline json export_validated(std::span<const Prediction> preds, const VerdictStore& store) {
  std::vector<json> features;
  for (const auto& p : preds) {
    const auto v = store.latest(p.id);
    if (!v || v->decision == Decision::rejected) continue;
    json props{{"id", p.id},
               {"probability", p.probability},
               {"decision", to_string(v->decision)},
               {"validator_id", v->validator_id},
               {"revision", v->revision}};
    geo::GeoPoint at = p.location;
    if (v->decision == Decision::relocated) {
      props["predicted_location"] = {{"lat", p.location.lat}, {"lon", p.location.lon}};
      at = *v->corrected_location;
    }
    features.push_back(geojson::point_feature(at, std::move(props)));
  }
  return geojson::feature_collection(std::move(features));
}

}  // namespace schoolmap::valsvc
