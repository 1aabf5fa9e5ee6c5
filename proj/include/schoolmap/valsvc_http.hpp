#pragma once

// HTTP/JSON endpoints for the validation workflow.
//
//   GET  /predictions?tau=&d=&matched=all|matched|unmatched   GeoJSON
//   GET  /government[?set=raw|cleaned]                        GeoJSON
//   GET  /stats?tau=&d=                                       counts
//   POST /verdicts                                            record a verdict
//   GET  /verdicts/<prediction id>                            current verdicts
//   GET  /export?format=geojson                               validated points
//
// Errors are {"error": message} with 400 (malformed), 404 (unknown id) or
// 409 (stale or conflicting revision).

#include <charconv>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "schoolmap/valsvc.hpp"

namespace schoolmap::valsvc {

struct Reply {
  int status = 200;
  json body;
};

class BadRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Service {
 public:
  // Matching uses `cleaned`; /government serves `raw_government` unaltered
  // (pass the cleaned collection when no raw file exists).
  Service(std::vector<Prediction> predictions, std::vector<GovernmentPoint> cleaned, json raw_government,
          const std::filesystem::path& verdict_log, MatchConfig defaults = {}, std::size_t snapshot_every = 256)
      : preds_(std::move(predictions)),
        gov_(std::move(cleaned)),
        raw_(std::move(raw_government)),
        defaults_(defaults),
        store_(verdict_log, ids(preds_), snapshot_every) {
    defaults_.validate();
    std::stable_sort(preds_.begin(), preds_.end(), [](const Prediction& a, const Prediction& b) {
      return a.probability > b.probability || (a.probability == b.probability && a.id < b.id);
    });
  }

  const VerdictStore& store() const { return store_; }

  Reply get_predictions(const httplib::Params& q) {
    return guarded([&] {
      const auto cfg = match_config(q);
      const std::string filter = param(q, "matched").value_or("all");
      if (filter != "all" && filter != "matched" && filter != "unmatched") {
        throw BadRequest("matched must be all, matched or unmatched");
      }
      const auto m = matched(cfg);
      std::unordered_map<std::string, const MatchPair*> by_pred;
      for (const auto& p : m->pairs) by_pred[p.prediction_id] = &p;
      std::vector<json> features;
      for (const auto& p : preds_) {
        if (!(p.probability > cfg.tau)) break;  // sorted by probability
        const auto it = by_pred.find(p.id);
        const bool is_matched = it != by_pred.end();
        if ((filter == "matched" && !is_matched) || (filter == "unmatched" && is_matched)) continue;
        json props = p.properties;
        props["id"] = p.id;
        props["probability"] = p.probability;
        props["match_status"] = is_matched ? "matched" : "unmatched";
        props["matched_government_id"] = is_matched ? json(it->second->government_id) : json(nullptr);
        props["match_distance_m"] = is_matched ? json(it->second->distance_m) : json(nullptr);
        const auto v = store_.latest(p.id);
        props["verdict"] = v ? to_json(*v) : json(nullptr);
        features.push_back(geojson::point_feature(p.location, std::move(props)));
      }
      auto fc = geojson::feature_collection(std::move(features));
      fc["tau"] = cfg.tau;
      fc["d"] = cfg.d;
      return Reply{200, std::move(fc)};
    });
  }

  Reply get_government(const httplib::Params& q) {
    return guarded([&] {
      const std::string set = param(q, "set").value_or("raw");
      if (set == "raw") return Reply{200, raw_};
      if (set != "cleaned") throw BadRequest("set must be raw or cleaned");
      std::vector<json> features;
      for (const auto& g : gov_) {
        json props = g.properties;
        props["id"] = g.id;
        features.push_back(geojson::point_feature(g.location, std::move(props)));
      }
      return Reply{200, geojson::feature_collection(std::move(features))};
    });
  }

  Reply get_stats(const httplib::Params& q) {
    return guarded([&] {
      const auto cfg = match_config(q);
      auto body = to_json(venn_stats(*matched(cfg)));
      body["tau"] = cfg.tau;
      body["d"] = cfg.d;
      return Reply{200, std::move(body)};
    });
  }

  // The validator id may come from the X-Validator-Id header.
  Reply post_verdict(const std::string& body, const std::string& validator_header = {}) {
    return guarded([&] {
      json j;
      try {
        j = json::parse(body);
      } catch (const json::parse_error& e) {
        throw BadRequest(std::string("body is not JSON: ") + e.what());
      }
      if (j.is_object() && !j.contains("validator_id") && !validator_header.empty()) {
        j["validator_id"] = validator_header;
      }
      const auto out = store_.record(verdict_from_json(j));
      return Reply{out.duplicate ? 200 : 201,
                   {{"status", out.duplicate ? "duplicate" : "recorded"}, {"verdict", to_json(out.verdict)}}};
    });
  }

  Reply get_verdicts(const std::string& prediction_id) {
    return guarded([&] {
      if (!store_.knows(prediction_id)) {
        throw VerdictError(VerdictError::Code::unknown_prediction, "unknown prediction id '" + prediction_id + "'");
      }
      json arr = json::array();
      for (const auto& v : store_.history(prediction_id)) arr.push_back(to_json(v));
      const auto latest = store_.latest(prediction_id);
      return Reply{200, {{"prediction_id", prediction_id},
                         {"latest", latest ? to_json(*latest) : json(nullptr)},
                         {"verdicts", arr}}};
    });
  }

  Reply get_export(const httplib::Params& q) {
    return guarded([&] {
      const std::string format = param(q, "format").value_or("geojson");
      if (format != "geojson") throw BadRequest("unsupported export format '" + format + "'");
      return Reply{200, export_validated(preds_, store_)};
    });
  }

  void mount(httplib::Server& srv) {
    auto send = [](httplib::Response& res, const Reply& r) {
      res.status = r.status;
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_content(r.body.dump(), (r.body.contains("type") && r.body["type"] == "FeatureCollection")
                                         ? "application/geo+json"
                                         : "application/json");
    };
    srv.Get("/predictions", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_predictions(req.params));
    });
    srv.Get("/government", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_government(req.params));
    });
    srv.Get("/stats", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_stats(req.params));
    });
    srv.Post("/verdicts", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, post_verdict(req.body, req.get_header_value("X-Validator-Id")));
    });
    srv.Get(R"(/verdicts/([^/]+))", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_verdicts(req.matches[1]));
    });
    srv.Get("/export", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, get_export(req.params));
    });
    srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", "*");
      res.set_header("Access-Control-Allow-Headers", "Content-Type, X-Validator-Id");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.status = 204;
    });
  }

 private:
  static std::unordered_set<std::string> ids(const std::vector<Prediction>& ps) {
    std::unordered_set<std::string> out;
    for (const auto& p : ps) out.insert(p.id);
    return out;
  }

  static std::optional<std::string> param(const httplib::Params& q, const std::string& key) {
    const auto it = q.find(key);
    if (it == q.end()) return std::nullopt;
    return it->second;
  }

  static std::optional<double> number(const httplib::Params& q, const std::string& key) {
    const auto s = param(q, key);
    if (!s) return std::nullopt;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s->data(), s->data() + s->size(), v);
    if (ec != std::errc() || ptr != s->data() + s->size() || !std::isfinite(v)) {
      throw BadRequest(key + " must be a number, got '" + *s + "'");
    }
    return v;
  }

  MatchConfig match_config(const httplib::Params& q) const {
    MatchConfig c = defaults_;
    if (const auto t = number(q, "tau")) c.tau = *t;
    if (const auto d = number(q, "d")) c.d = *d;
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw BadRequest(e.what());
    }
    return c;
  }

  // Matching is recomputed per (tau, d) and cached.
  std::shared_ptr<const MatchResult> matched(const MatchConfig& c) {
    const auto key = std::make_pair(c.tau, c.d);
    {
      std::lock_guard lock(cache_mu_);
      if (const auto it = cache_.find(key); it != cache_.end()) return it->second;
    }
    const auto filtered = filter_predictions(preds_, c.tau);
    auto r = std::make_shared<const MatchResult>(match(filtered, gov_, c.d));
    std::lock_guard lock(cache_mu_);
    if (cache_.size() >= 64) cache_.clear();
    cache_.emplace(key, r);
    return r;
  }

  template <typename Fn>
  Reply guarded(Fn&& fn) {
    try {
      return fn();
    } catch (const BadRequest& e) {
      return {400, {{"error", e.what()}}};
    } catch (const VerdictError& e) {
      const int code = e.code() == VerdictError::Code::invalid             ? 400
                       : e.code() == VerdictError::Code::unknown_prediction ? 404
                                                                            : 409;
      return {code, {{"error", e.what()}}};
    } catch (const std::exception& e) {
      return {500, {{"error", e.what()}}};
    }
  }

  std::vector<Prediction> preds_;  // decreasing probability, then id
  std::vector<GovernmentPoint> gov_;
  json raw_;
  MatchConfig defaults_;
  VerdictStore store_;
  std::mutex cache_mu_;
  std::map<std::pair<double, double>, std::shared_ptr<const MatchResult>> cache_;
};

}  // namespace schoolmap::valsvc
