#pragma once

// The contract between a classifier backend and the attribution stack.
//
// A backend exposes, per image: logits [K], softmax [K], activations
// [C, Hc, Wc] at the target layer, and gradients [C, Hc, Wc] of the school
// logit (class index 1, pre-softmax) with respect to those activations.
// Transformer backends drop the class token and reshape [T, C] tokens to
// [C, sqrt(T), sqrt(T)] before export.
//
// On disk, one directory per image:
//   logits.gten  softmax.gten  activations.gten  gradients.gten  meta.json

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "schoolmap/error.hpp"
#include "schoolmap/geojson.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap {

inline constexpr std::size_t kSchoolClass = 1;

struct FeatureBundle {
  Tensor logits;
  Tensor softmax;
  Tensor activations;
  Tensor gradients;

  float school_probability() const { return softmax[kSchoolClass]; }

  void validate() const {
    if (logits.rank() != 1 || softmax.shape() != logits.shape()) {
      throw DataError("bundle logits/softmax must be matching [K] vectors");
    }
    double sum = 0.0;
    for (float p : softmax.data()) sum += p;
    if (std::abs(sum - 1.0) > 1e-6) throw DataError("bundle softmax does not sum to 1");
    if (activations.rank() != 3 || activations.shape() != gradients.shape()) {
      throw DataError("bundle activations " + shape_string(activations.shape()) +
                      " and gradients " + shape_string(gradients.shape()) +
                      " must be matching [C, H, W]");
    }
  }
};

// Max-shifted, so invariant to adding a constant to every logit.
template <typename Real>
std::vector<Real> softmax(std::span<const Real> logits) {
  std::vector<Real> out(logits.size());
  if (logits.empty()) return out;
  const Real m = *std::max_element(logits.begin(), logits.end());
  Real sum = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) sum += out[i] = std::exp(logits[i] - m);
  for (auto& v : out) v /= sum;
  return out;
}

inline Tensor softmax(const Tensor& logits) {
  auto d = logits.data();
  std::vector<double> wide(d.begin(), d.end());
  const auto p = softmax<double>(wide);
  return Tensor(logits.shape(), std::vector<float>(p.begin(), p.end()));
}

// Any inference runtime able to produce feature bundles.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual FeatureBundle infer(const Tensor& image) const = 0;
  virtual std::string model_id() const = 0;
};

inline void write_bundle_dir(const std::filesystem::path& dir, const FeatureBundle& b,
                             const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  write_tensor(b.logits, (dir / "logits.gten").string());
  write_tensor(b.softmax, (dir / "softmax.gten").string());
  write_tensor(b.activations, (dir / "activations.gten").string());
  write_tensor(b.gradients, (dir / "gradients.gten").string());
  geojson::write_file((dir / "meta.json").string(), meta);
}

inline FeatureBundle read_bundle_dir(const std::filesystem::path& dir,
                                     nlohmann::json* meta = nullptr) {
  FeatureBundle b;
  b.logits = read_tensor((dir / "logits.gten").string());
  b.softmax = read_tensor((dir / "softmax.gten").string());
  b.activations = read_tensor((dir / "activations.gten").string());
  b.gradients = read_tensor((dir / "gradients.gten").string());
  b.validate();
  if (meta) *meta = geojson::read_file((dir / "meta.json").string());
  return b;
}

}  // namespace schoolmap
