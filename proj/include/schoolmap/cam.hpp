#pragma once

// Class activation maps from a FeatureBundle, upsampling, and peak
// geolocation.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "schoolmap/bundle.hpp"
#include "schoolmap/error.hpp"
#include "schoolmap/geo.hpp"
#include "schoolmap/tensor.hpp"

namespace schoolmap::cam {

enum class Method { gradcam, gradcam_pp, gradcam_elementwise, hirescam, eigencam, eigengradcam, layercam };

inline constexpr std::array<Method, 7> kAllMethods{
    Method::gradcam,  Method::gradcam_pp,   Method::gradcam_elementwise, Method::hirescam,
    Method::eigencam, Method::eigengradcam, Method::layercam};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::gradcam: return "gradcam";
    case Method::gradcam_pp: return "gradcam_pp";
    case Method::gradcam_elementwise: return "gradcam_elementwise";
    case Method::hirescam: return "hirescam";
    case Method::eigencam: return "eigencam";
    case Method::eigengradcam: return "eigengradcam";
    case Method::layercam: return "layercam";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : kAllMethods)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown CAM method '" + std::string(s) + "'");
}

inline constexpr double kGradCamPpDelta = 1e-8;

struct Cam {
  Tensor values;  // [H, W] in [0, 1]
  Method method = Method::gradcam;
  bool degenerate = false;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

// Row-major [H, W] map before normalization.
struct RawMap {
  std::size_t h = 0, w = 0;
  std::vector<double> v;
};

namespace detail {

struct Features {
  std::size_t C, H, W;
  std::vector<double> A, G;

  std::size_t P() const { return H * W; }
  double a(std::size_t c, std::size_t i) const { return A[c * P() + i]; }
  double g(std::size_t c, std::size_t i) const { return G[c * P() + i]; }
};

inline Features features(const FeatureBundle& b) {
  const auto& A = b.activations;
  const auto& G = b.gradients;
  if (A.rank() != 3 || A.shape() != G.shape()) {
    throw DataError("CAM needs matching [C, H, W] activations and gradients, got " +
                    shape_string(A.shape()) + " and " + shape_string(G.shape()));
  }
  if (A.dim(0) == 0) throw DataError("CAM needs at least one channel");
  if (A.dim(1) == 0 || A.dim(2) == 0) throw DataError("CAM needs a non-empty spatial grid");
  return {A.dim(0), A.dim(1), A.dim(2), std::vector<double>(A.data().begin(), A.data().end()),
          std::vector<double>(G.data().begin(), G.data().end())};
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

// sigma_1 * v_1 of the C x P matrix M, signed so its largest-|.| entry is
// positive (first such entry on ties).
inline std::vector<double> principal_projection(const std::vector<double>& m, std::size_t C,
                                                std::size_t P) {
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> M(
      m.data(), static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(P));
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinV);
  std::vector<double> out(P, 0.0);
  if (svd.singularValues().size() == 0) return out;
  const double s = svd.singularValues()(0);
  const auto v = svd.matrixV().col(0);
  std::size_t arg = 0;
  for (std::size_t i = 0; i < P; ++i) {
    out[i] = s * v(static_cast<Eigen::Index>(i));
    if (std::abs(out[i]) > std::abs(out[arg])) arg = i;
  }
  if (out[arg] < 0.0)
    for (auto& x : out) x = -x;
  return out;
}

}  // namespace detail

inline RawMap raw_map(Method method, const FeatureBundle& bundle) {
  const auto f = detail::features(bundle);
  const std::size_t C = f.C, P = f.P();
  RawMap r{f.H, f.W, std::vector<double>(P, 0.0)};
  auto weighted_sum = [&](const std::vector<double>& w) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < P; ++i) r.v[i] += w[c] * f.a(c, i);
    for (auto& x : r.v) x = detail::relu(x);
  };
  switch (method) {
    case Method::gradcam: {
      std::vector<double> w(C, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < P; ++i) w[c] += f.g(c, i);
        w[c] /= static_cast<double>(P);
      }
      weighted_sum(w);
      break;
    }
    case Method::hirescam:
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) r.v[i] += f.g(c, i) * f.a(c, i);
      for (auto& x : r.v) x = detail::relu(x);
      break;
    case Method::gradcam_elementwise:
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) r.v[i] += detail::relu(f.g(c, i) * f.a(c, i));
      break;
    case Method::layercam:
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t i = 0; i < P; ++i) r.v[i] += detail::relu(f.g(c, i)) * f.a(c, i);
      for (auto& x : r.v) x = detail::relu(x);
      break;
    case Method::gradcam_pp: {
      std::vector<double> w(C, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        double g3 = 0.0;
        for (std::size_t i = 0; i < P; ++i) g3 += f.g(c, i) * f.g(c, i) * f.g(c, i);
        for (std::size_t i = 0; i < P; ++i) {
          const double g = f.g(c, i), g2 = g * g;
          const double alpha = g2 / (2.0 * g2 + f.a(c, i) * g3 + kGradCamPpDelta);
          w[c] += alpha * detail::relu(g);
        }
      }
      weighted_sum(w);
      break;
    }
    case Method::eigencam:
      r.v = detail::principal_projection(f.A, C, P);
      break;
    case Method::eigengradcam: {
      std::vector<double> ga(C * P);
      for (std::size_t k = 0; k < ga.size(); ++k) ga[k] = f.G[k] * f.A[k];
      r.v = detail::principal_projection(ga, C, P);
      break;
    }
  }
  return r;
}

// Min-max to [0, 1]; an exactly constant map becomes zeros, flagged.
inline Cam normalize(const RawMap& raw, Method method) {
  Cam c{Tensor({raw.h, raw.w}), method, false};
  if (raw.v.empty()) throw DataError("cannot normalize an empty map");
  const auto [lo, hi] = std::minmax_element(raw.v.begin(), raw.v.end());
  const double mn = *lo, mx = *hi;
  if (!std::isfinite(mn) || !std::isfinite(mx)) throw DataError("CAM raw map is not finite");
  if (mx == mn) {
    c.degenerate = true;
    return c;
  }
  for (std::size_t i = 0; i < raw.v.size(); ++i) {
    c.values[i] = static_cast<float>(std::clamp((raw.v[i] - mn) / (mx - mn), 0.0, 1.0));
  }
  return c;
}

inline Cam compute_cam(Method method, const FeatureBundle& bundle) {
  return normalize(raw_map(method, bundle), method);
}

// Bilinear, corner-aligned.
inline Cam upsample(const Cam& in, std::size_t out_h, std::size_t out_w) {
  const std::size_t H = in.height(), W = in.width();
  if (out_h < H || out_w < W) {
    throw DataError("upsample_cam cannot shrink " + shape_string(in.values.shape()) + " to [" +
                    std::to_string(out_h) + "," + std::to_string(out_w) + "]");
  }
  Cam out{Tensor({out_h, out_w}), in.method, in.degenerate};
  auto src = [](std::size_t i, std::size_t n_out, std::size_t n_in) {
    return n_out == 1 || n_in == 1
               ? 0.0
               : static_cast<double>(i) * static_cast<double>(n_in - 1) / static_cast<double>(n_out - 1);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = src(y, out_h, H);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), H - 1), y1 = std::min(y0 + 1, H - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = src(x, out_w, W);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), W - 1),
                        x1 = std::min(x0 + 1, W - 1);
      const double fx = sx - static_cast<double>(x0);
      const double v = (1 - fy) * ((1 - fx) * in.values.at(y0, x0) + fx * in.values.at(y0, x1)) +
                       fy * ((1 - fx) * in.values.at(y1, x0) + fx * in.values.at(y1, x1));
      out.values.at(y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

inline Cam upsample(const Cam& in, std::size_t out) { return upsample(in, out, out); }

// Smallest row-major index among the maxima.
inline std::size_t argmax_index(const Tensor& t) {
  const auto d = t.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

struct Peak {
  geo::GeoPoint location;
  double value = 0.0;
  std::size_t px = 0, py = 0;  // column, row
};

inline Peak peak_to_geo(const Cam& c, const geo::TileSpec& tile) {
  if (c.degenerate) throw DataError("no localization: degenerate CAM");
  if (c.height() != static_cast<std::size_t>(tile.px) || c.width() != static_cast<std::size_t>(tile.px)) {
    throw DataError("CAM " + shape_string(c.values.shape()) + " must be upsampled to the tile's " +
                    std::to_string(tile.px) + " px before peak extraction");
  }
  const std::size_t i = argmax_index(c.values);
  Peak p;
  p.py = i / c.width();
  p.px = i % c.width();
  p.value = c.values[i];
  p.location = geo::pixel_to_geo(tile, static_cast<int>(p.px), static_cast<int>(p.py));
  return p;
}

}  // namespace schoolmap::cam
