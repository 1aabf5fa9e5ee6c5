#pragma once

// Precision-recall, average precision, F-beta, threshold selection,
// per-stratum breakdowns and train/test generalization matrices.
// Decision rule throughout: predict school iff score > tau.

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "schoolmap/error.hpp"
#include "schoolmap/parallel.hpp"

namespace schoolmap::metrics {

struct PrPoint {
  double threshold;  // the unique score; predictions are score >= threshold
  double precision;
  double recall;
};

struct PrCurve {
  std::vector<PrPoint> points;  // descending threshold
  double auprc = 0.0;
};

inline void check_inputs(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw DataError("got " + std::to_string(scores.size()) + " scores for " +
                    std::to_string(labels.size()) + " labels");
  }
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw DataError("score " + std::to_string(i) + " is not finite");
    (labels[i] ? pos : neg) = true;
  }
  if (!pos || !neg) throw DataError("precision-recall needs both positive and negative labels");
}

// Stepwise over descending unique scores with ties grouped;
// auprc = sum_i (R_i - R_{i-1}) P_i.
inline PrCurve pr_curve(std::span<const double> scores, std::span<const int> labels) {
  check_inputs(scores, labels);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const double npos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  PrCurve c;
  double tp = 0, fp = 0, prev_recall = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scores[idx[i]];
    for (; i < idx.size() && scores[idx[i]] == s; ++i) (labels[idx[i]] ? tp : fp) += 1;
    const double p = tp / (tp + fp), r = tp / npos;
    c.points.push_back({s, p, r});
    c.auprc += (r - prev_recall) * p;
    prev_recall = r;
  }
  return c;
}

inline double auprc(std::span<const double> scores, std::span<const int> labels) {
  return pr_curve(scores, labels).auprc;
}

// (1 + b^2) P R / (b^2 P + R); 0 when P = R = 0.
inline double fbeta(double precision, double recall, double beta = 2.0) {
  if (precision < 0 || precision > 1 || recall < 0 || recall > 1) {
    throw DataError("precision and recall must lie in [0, 1]");
  }
  const double b2 = beta * beta;
  const double den = b2 * precision + recall;
  return den == 0.0 ? 0.0 : (1 + b2) * precision * recall / den;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision() const { return tp + fp ? double(tp) / double(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? double(tp) / double(tp + fn) : 0.0; }
};

inline Confusion confusion_at(std::span<const double> scores, std::span<const int> labels, double tau) {
  Confusion c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] > tau;
    if (labels[i]) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

struct SweepRow {
  double tau, precision, recall, f;
};

struct ThresholdSweep {
  std::vector<SweepRow> rows;  // ascending tau
  std::size_t best = 0;
  double beta = 2.0;
  double tau_star() const { return rows[best].tau; }
  double best_f() const { return rows[best].f; }
};

// F-beta at every midpoint between consecutive unique scores; the first
// (smallest) tau attaining the maximum wins. With a single unique score
// the sweep holds one tau just below it.
inline ThresholdSweep optimize_threshold(std::span<const double> scores, std::span<const int> labels,
                                         double beta = 2.0) {
  check_inputs(scores, labels);
  std::vector<double> u(scores.begin(), scores.end());
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  std::vector<double> taus;
  for (std::size_t i = 0; i + 1 < u.size(); ++i) taus.push_back(u[i] + (u[i + 1] - u[i]) / 2);
  if (taus.empty()) taus.push_back(std::nextafter(u.front(), -std::numeric_limits<double>::infinity()));
  ThresholdSweep sw;
  sw.beta = beta;
  for (double t : taus) {
    const auto c = confusion_at(scores, labels, t);
    sw.rows.push_back({t, c.precision(), c.recall(), fbeta(c.precision(), c.recall(), beta)});
    if (sw.rows.back().f > sw.rows[sw.best].f) sw.best = sw.rows.size() - 1;
  }
  return sw;
}

// --- strata ---------------------------------------------------------------------

struct StratumResult {
  std::optional<double> auprc;  // absent when the stratum lacks a class
  std::size_t positives = 0, negatives = 0;
};

inline std::map<std::string, StratumResult> disaggregate(std::span<const double> scores,
                                                         std::span<const int> labels,
                                                         std::span<const std::string> strata) {
  if (scores.size() != labels.size() || strata.size() != labels.size()) {
    throw DataError("scores, labels and strata must have equal length");
  }
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> groups;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    groups[strata[i]].first.push_back(scores[i]);
    groups[strata[i]].second.push_back(labels[i]);
  }
  std::map<std::string, StratumResult> out;
  for (const auto& [name, g] : groups) {
    StratumResult r;
    r.positives = static_cast<std::size_t>(std::count(g.second.begin(), g.second.end(), 1));
    r.negatives = g.second.size() - r.positives;
    if (r.positives && r.negatives) r.auprc = auprc(g.first, g.second);
    out[name] = r;
  }
  return out;
}

// --- generalization matrix -----------------------------------------------------------

struct LabeledSet {
  std::string name;
  std::vector<int> labels;
};

// Scores of model i on set j, or nullopt when that pairing is unavailable.
using Scorer = std::function<std::optional<std::vector<double>>(std::size_t model, std::size_t set)>;

struct Matrix {
  std::vector<std::string> models;
  std::vector<std::string> sets;
  std::vector<std::optional<double>> cells;  // row-major models x sets

  std::optional<double> at(std::size_t i, std::size_t j) const { return cells[i * sets.size() + j]; }
};

inline Matrix generalization_matrix(std::span<const std::string> models, std::span<const LabeledSet> sets,
                                    const Scorer& scorer, std::size_t workers = 1) {
  Matrix m{{models.begin(), models.end()}, {}, {}};
  for (const auto& s : sets) m.sets.push_back(s.name);
  m.cells.resize(models.size() * sets.size());
  parallel_for(m.cells.size(), workers, [&](std::size_t k) {
    const std::size_t i = k / sets.size(), j = k % sets.size();
    const auto scores = scorer(i, j);
    if (scores) m.cells[k] = auprc(*scores, sets[j].labels);
  });
  return m;
}

inline std::string to_csv(const Matrix& m) {
  std::ostringstream os;
  os << "model";
  for (const auto& s : m.sets) os << "," << s;
  os << "\n" << std::setprecision(6);
  for (std::size_t i = 0; i < m.models.size(); ++i) {
    os << m.models[i];
    for (std::size_t j = 0; j < m.sets.size(); ++j) {
      os << ",";
      if (const auto v = m.at(i, j)) os << *v;
    }
    os << "\n";
  }
  return os.str();
}

// --- reports -------------------------------------------------------------------------

struct ThresholdReportRow {
  std::string name;
  double tau = 0.0;
  double f = 0.0, precision = 0.0, recall = 0.0;
};

// tau* chosen on validation, applied to test.
inline ThresholdReportRow threshold_report(const std::string& name, std::span<const double> val_scores,
                                           std::span<const int> val_labels,
                                           std::span<const double> test_scores,
                                           std::span<const int> test_labels, double beta = 2.0) {
  const double tau = optimize_threshold(val_scores, val_labels, beta).tau_star();
  check_inputs(test_scores, test_labels);
  const auto c = confusion_at(test_scores, test_labels, tau);
  return {name, tau, fbeta(c.precision(), c.recall(), beta), c.precision(), c.recall()};
}

inline std::string render_threshold_table(std::span<const ThresholdReportRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(10) << "set" << std::right << std::setw(8) << "tau*" << std::setw(8)
     << "F2" << std::setw(11) << "precision" << std::setw(8) << "recall" << "\n"
     << std::fixed << std::setprecision(3);
  for (const auto& r : rows) {
    os << std::left << std::setw(10) << r.name << std::right << std::setw(8) << r.tau << std::setw(8)
       << r.f << std::setw(11) << r.precision << std::setw(8) << r.recall << "\n";
  }
  return os.str();
}

inline nlohmann::json to_json(const PrCurve& c) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : c.points) pts.push_back({p.threshold, p.precision, p.recall});
  return {{"auprc", c.auprc}, {"convention", "average_precision"}, {"points", pts}};
}

inline nlohmann::json to_json(const ThresholdSweep& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) {
    rows.push_back({{"tau", r.tau}, {"precision", r.precision}, {"recall", r.recall}, {"f", r.f}});
  }
  return {{"beta", s.beta}, {"tau_star", s.tau_star()}, {"best_f", s.best_f()}, {"rows", rows}};
}

inline nlohmann::json to_json(const std::map<std::string, StratumResult>& d) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, r] : d) {
    j[k] = {{"auprc", r.auprc ? nlohmann::json(*r.auprc) : nlohmann::json("undefined")},
            {"positives", r.positives},
            {"negatives", r.negatives}};
  }
  return j;
}

}  // namespace schoolmap::metrics
