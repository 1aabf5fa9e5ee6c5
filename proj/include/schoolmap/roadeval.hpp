#pragma once

// Attribution faithfulness: MoRF masking, noisy linear imputation,
// a Canny-based washed-out guard, and confidence drop per CAM method.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Sparse>
#include <json.hpp>

#include "schoolmap/bundle.hpp"
#include "schoolmap/cam.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/parallel.hpp"
#include "schoolmap/rng.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::roadeval {

struct CannyConfig {
  double sigma = 1.4;
  double low = 0.1;   // fractions of the max gradient magnitude
  double high = 0.3;
};

struct PerturbationConfig {
  double top_fraction = 0.10;
  double noise_std = 0.01;
  double edge_density_threshold = 0.01;
  CannyConfig canny{};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(top_fraction > 0.0 && top_fraction < 1.0)) throw ConfigError("top_fraction must be in (0, 1)");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (!(canny.sigma > 0.0)) throw ConfigError("canny sigma must be positive");
    if (!(canny.low >= 0.0 && canny.low <= canny.high)) {
      throw ConfigError("canny thresholds must satisfy 0 <= low <= high");
    }
  }
};

struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> bits;  // row-major, 1 = removed

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator[](std::size_t i) const { return bits[i] != 0; }
};

// ceil(q H W) highest-valued pixels; ties by smallest row-major index.
inline Mask morf_mask(const cam::Cam& c, double q) {
  if (c.degenerate) throw DataError("MoRF mask needs a non-degenerate CAM");
  if (!(q > 0.0 && q < 1.0)) throw ConfigError("top fraction must be in (0, 1)");
  const std::size_t n = c.values.size();
  const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto v = c.values.data();
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  Mask m{c.height(), c.width(), std::vector<std::uint8_t>(n, 0)};
  for (std::size_t i = 0; i < k; ++i) m.bits[idx[i]] = 1;
  return m;
}

// --- imputation ------------------------------------------------------------

inline constexpr double kAdjacentWeight = 1.0 / 6.0;
inline constexpr double kDiagonalWeight = 1.0 / 12.0;
inline constexpr double kResidualTolerance = 1e-6;

struct Neighbor {
  std::size_t index;
  double weight;
};

// 8-neighborhood weights renormalized over in-bounds neighbors.
inline std::vector<Neighbor> neighbor_weights(std::size_t y, std::size_t x, std::size_t h,
                                              std::size_t w) {
  std::vector<Neighbor> out;
  double total = 0.0;
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) {
      if (dx == 0 && dy == 0) continue;
      const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
      if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w)) continue;
      const double wt = (dx == 0 || dy == 0) ? kAdjacentWeight : kDiagonalWeight;
      out.push_back({static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx), wt});
      total += wt;
    }
  for (auto& n : out) n.weight /= total;
  return out;
}

struct ImputeResult {
  Tensor image;
  double max_residual = 0.0;
};

// Per masked pixel i and channel: x_i - sum_{masked j} w_ij x_j
//   = sum_{known j} w_ij v_j + eps_i,  eps_i ~ N(0, sigma).
inline ImputeResult noisy_linear_impute(const Tensor& image, const Mask& mask, double sigma,
                                        std::uint64_t seed) {
  if (image.rank() != 3) throw DataError("imputation needs a [C, H, W] image");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), P = H * W;
  if (mask.h != H || mask.w != W || mask.bits.size() != P) {
    throw DataError("mask size does not match image " + shape_string(image.shape()));
  }
  ImputeResult r{image, 0.0};
  std::vector<long> var(P, -1);
  std::vector<std::size_t> masked;
  for (std::size_t i = 0; i < P; ++i)
    if (mask[i]) {
      var[i] = static_cast<long>(masked.size());
      masked.push_back(i);
    }
  const std::size_t n = masked.size();
  if (n == 0) return r;
  if (n == P) throw DataError("cannot impute a fully masked image");

  using Sp = Eigen::SparseMatrix<double>;
  std::vector<Eigen::Triplet<double>> trips;
  std::vector<std::vector<Neighbor>> nbrs(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t i = masked[k];
    nbrs[k] = neighbor_weights(i / W, i % W, H, W);
    trips.emplace_back(k, k, 1.0);
    for (const auto& nb : nbrs[k])
      if (var[nb.index] >= 0) trips.emplace_back(k, var[nb.index], -nb.weight);
  }
  Sp A(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  A.setFromTriplets(trips.begin(), trips.end());
  A.makeCompressed();
  Eigen::SparseLU<Sp> lu;
  lu.compute(A);
  if (lu.info() != Eigen::Success) throw Error(ErrorKind::internal, "imputation factorization failed");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma > 0.0 ? sigma : 1.0);
  for (std::size_t c = 0; c < C; ++c) {
    const float* src = image.data().data() + c * P;
    Eigen::VectorXd b(static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < n; ++k) {
      double rhs = sigma > 0.0 ? noise(rng) : 0.0;
      for (const auto& nb : nbrs[k])
        if (var[nb.index] < 0) rhs += nb.weight * src[nb.index];
      b(static_cast<Eigen::Index>(k)) = rhs;
    }
    const Eigen::VectorXd x = lu.solve(b);
    const double res = (A * x - b).lpNorm<Eigen::Infinity>();
    if (!(res <= kResidualTolerance)) {
      throw Error(ErrorKind::internal, "imputation solve did not converge: residual " + std::to_string(res));
    }
    r.max_residual = std::max(r.max_residual, res);
    float* dst = r.image.data().data() + c * P;
    for (std::size_t k = 0; k < n; ++k) dst[masked[k]] = static_cast<float>(x(static_cast<Eigen::Index>(k)));
  }
  return r;
}

// --- Canny ---------------------------------------------------------------------

namespace detail {

inline std::size_t reflect_index(long i, std::size_t n) {
  if (n == 1) return 0;
  const long period = 2 * static_cast<long>(n - 1);
  i = std::abs(i) % period;
  return static_cast<std::size_t>(i > static_cast<long>(n - 1) ? period - i : i);
}

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) s += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

}  // namespace detail

struct EdgeMap {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> edges;
  double fraction() const {
    return edges.empty() ? 0.0
                         : static_cast<double>(std::count(edges.begin(), edges.end(), 1)) /
                               static_cast<double>(edges.size());
  }
};

// Channel-mean gray -> Gaussian blur -> Sobel -> non-maximum suppression ->
// hysteresis (8-connected). Borders use reflection.
inline EdgeMap canny(const Tensor& image, const CannyConfig& cfg = {}) {
  if (image.rank() != 3) throw DataError("edge detection needs a [C, H, W] image");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2), P = H * W;
  std::vector<double> gray(P, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) gray[i] += image[c * P + i];
  for (auto& v : gray) v /= static_cast<double>(C);

  const auto k = detail::gaussian_kernel(cfg.sigma);
  const long r = static_cast<long>(k.size() / 2);
  std::vector<double> tmp(P), blur(P);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0.0;
      for (long d = -r; d <= r; ++d) s += k[d + r] * gray[y * W + detail::reflect_index(long(x) + d, W)];
      tmp[y * W + x] = s;
    }
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0.0;
      for (long d = -r; d <= r; ++d) s += k[d + r] * tmp[detail::reflect_index(long(y) + d, H) * W + x];
      blur[y * W + x] = s;
    }

  auto at = [&](long y, long x) { return blur[detail::reflect_index(y, H) * W + detail::reflect_index(x, W)]; };
  std::vector<double> mag(P), gx(P), gy(P);
  for (long y = 0; y < long(H); ++y)
    for (long x = 0; x < long(W); ++x) {
      const double sx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
      const double sy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                        (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
      const std::size_t i = std::size_t(y) * W + std::size_t(x);
      gx[i] = sx;
      gy[i] = sy;
      mag[i] = std::hypot(sx, sy);
    }

  // Keep a pixel iff it beats the backward neighbor strictly and the forward
  // one weakly, so a symmetric ridge yields a single pixel.
  EdgeMap out{H, W, std::vector<std::uint8_t>(P, 0)};
  const double mmax = *std::max_element(mag.begin(), mag.end());
  if (!(mmax > 1e-12)) return out;
  auto m_at = [&](long y, long x) {
    return (y < 0 || x < 0 || y >= long(H) || x >= long(W)) ? 0.0 : mag[std::size_t(y) * W + std::size_t(x)];
  };
  std::vector<double> thin(P, 0.0);
  for (long y = 0; y < long(H); ++y)
    for (long x = 0; x < long(W); ++x) {
      const std::size_t i = std::size_t(y) * W + std::size_t(x);
      if (mag[i] <= 0.0) continue;
      double ang = std::atan2(gy[i], gx[i]) * 180.0 / 3.14159265358979323846;
      if (ang < 0) ang += 180.0;
      int dx = 1, dy = 0;
      if (ang >= 22.5 && ang < 67.5) { dx = 1; dy = 1; }
      else if (ang >= 67.5 && ang < 112.5) { dx = 0; dy = 1; }
      else if (ang >= 112.5 && ang < 157.5) { dx = -1; dy = 1; }
      if (mag[i] > m_at(y - dy, x - dx) && mag[i] >= m_at(y + dy, x + dx)) thin[i] = mag[i];
    }

  const double hi = cfg.high * mmax, lo = cfg.low * mmax;
  std::vector<std::size_t> stack;
  for (std::size_t i = 0; i < P; ++i)
    if (thin[i] >= hi && thin[i] > 0.0) {
      out.edges[i] = 1;
      stack.push_back(i);
    }
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    const long y = long(i / W), x = long(i % W);
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const long ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= long(H) || nx >= long(W)) continue;
        const std::size_t j = std::size_t(ny) * W + std::size_t(nx);
        if (!out.edges[j] && thin[j] >= lo && thin[j] > 0.0) {
          out.edges[j] = 1;
          stack.push_back(j);
        }
      }
  }
  return out;
}

// True when the image carries too little edge structure to be trusted.
inline bool degenerate_check(const Tensor& image, const PerturbationConfig& cfg = {}) {
  return canny(image, cfg.canny).fraction() < cfg.edge_density_threshold;
}

// --- confidence drop ------------------------------------------------------------------

struct DropResult {
  double original = 0.0;
  double perturbed = 0.0;
  double drop = 0.0;
  bool degenerate = false;
  std::string reason;  // "", "degenerate cam", "washed out"
};

// cam must already match the image's spatial size.
inline DropResult confidence_drop(const Backend& backend, const Tensor& image, const cam::Cam& c,
                                  const PerturbationConfig& cfg, std::uint64_t seed) {
  DropResult r;
  r.original = backend.infer(image).school_probability();
  if (c.degenerate) {
    r.perturbed = r.original;
    r.degenerate = true;
    r.reason = "degenerate cam";
    return r;
  }
  if (c.height() != image.dim(1) || c.width() != image.dim(2)) {
    throw DataError("CAM " + shape_string(c.values.shape()) + " does not match image " +
                    shape_string(image.shape()));
  }
  const auto mask = morf_mask(c, cfg.top_fraction);
  const auto imputed = noisy_linear_impute(image, mask, cfg.noise_std, seed).image;
  r.perturbed = backend.infer(imputed).school_probability();
  if (degenerate_check(imputed, cfg)) {
    r.degenerate = true;
    r.reason = "washed out";
    return r;
  }
  r.drop = r.original - r.perturbed;
  return r;
}

// --- evaluation over a test set -------------------------------------------------------

inline constexpr const char* kRandomBaseline = "random";

struct DropRow {
  std::string image_id;
  std::string method;
  DropResult result;
};

struct MethodSummary {
  std::string method;
  double mean_drop = 0.0;
  std::size_t images = 0;
  std::size_t degenerate = 0;
};

struct ConfidenceDropReport {
  std::vector<MethodSummary> methods;
  std::vector<DropRow> rows;

  const MethodSummary& summary(const std::string& m) const {
    for (const auto& s : methods)
      if (s.method == m) return s;
    throw DataError("no summary for method '" + m + "'");
  }
};

// Uniform-noise attribution: a size-matched random MoRF mask.
inline cam::Cam random_cam(std::size_t h, std::size_t w, std::uint64_t seed) {
  cam::Cam c{Tensor({h, w}), cam::Method::gradcam, false};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : c.values.data()) v = u(rng);
  return c;
}

inline ConfidenceDropReport evaluate_methods(std::span<const Tensor> images,
                                             std::span<const std::string> ids,
                                             const Backend& backend,
                                             std::span<const cam::Method> methods,
                                             const PerturbationConfig& cfg,
                                             bool random_baseline = false,
                                             std::size_t workers = 1) {
  cfg.validate();
  if (images.empty()) throw DataError("ROAD evaluation needs at least one image");
  if (ids.size() != images.size()) throw DataError("need one id per image");
  std::vector<std::string> names;
  for (auto m : methods) names.emplace_back(cam::to_string(m));
  if (random_baseline) names.emplace_back(kRandomBaseline);
  const std::size_t M = names.size();
  std::vector<DropRow> rows(images.size() * M);
  parallel_for(images.size(), workers, [&](std::size_t i) {
    const Tensor& img = images[i];
    const auto bundle = backend.infer(img);
    for (std::size_t m = 0; m < M; ++m) {
      const std::uint64_t s = rng::mix(cfg.seed, i, m);
      cam::Cam c = m < methods.size()
                       ? cam::upsample(cam::compute_cam(methods[m], bundle), img.dim(1), img.dim(2))
                       : random_cam(img.dim(1), img.dim(2), s ^ 0xabcdef);
      rows[i * M + m] = {ids[i], names[m], confidence_drop(backend, img, c, cfg, s)};
    }
  });
  ConfidenceDropReport rep;
  rep.rows = std::move(rows);
  for (std::size_t m = 0; m < M; ++m) {
    MethodSummary s{names[m], 0.0, images.size(), 0};
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& r = rep.rows[i * M + m].result;
      s.mean_drop += r.drop;
      s.degenerate += r.degenerate;
    }
    s.mean_drop /= static_cast<double>(images.size());
    rep.methods.push_back(s);
  }
  return rep;
}

inline nlohmann::json to_json(const ConfidenceDropReport& rep, const PerturbationConfig& cfg) {
  nlohmann::json j;
  j["config"] = {{"top_fraction", cfg.top_fraction},
                 {"noise_std", cfg.noise_std},
                 {"edge_density_threshold", cfg.edge_density_threshold},
                 {"canny", {{"sigma", cfg.canny.sigma}, {"low", cfg.canny.low}, {"high", cfg.canny.high}}},
                 {"seed", cfg.seed}};
  for (const auto& s : rep.methods) {
    j["methods"].push_back({{"method", s.method},
                            {"mean_drop", s.mean_drop},
                            {"images", s.images},
                            {"degenerate", s.degenerate}});
  }
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rep.rows) {
    j["rows"].push_back({{"image_id", r.image_id},
                         {"method", r.method},
                         {"original", r.result.original},
                         {"perturbed", r.result.perturbed},
                         {"drop", r.result.drop},
                         {"degenerate", r.result.degenerate},
                         {"reason", r.result.reason}});
  }
  return j;
}

inline std::string render_table(const ConfidenceDropReport& rep) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "method" << std::right << std::setw(12) << "mean_drop"
     << std::setw(8) << "images" << std::setw(12) << "degenerate" << "\n";
  for (const auto& s : rep.methods) {
    os << std::left << std::setw(22) << s.method << std::right << std::setw(12) << std::fixed
       << std::setprecision(4) << s.mean_drop << std::setw(8) << s.images << std::setw(12)
       << s.degenerate << "\n";
  }
  return os.str();
}

}  // namespace schoolmap::roadeval
