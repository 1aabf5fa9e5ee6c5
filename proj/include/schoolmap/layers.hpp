#pragma once

// Forward/backward kernels for the toy classifier. Feature maps are
// channel-first [C, H, W] buffers; backward passes accumulate into their
// gradient outputs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace schoolmap::layers {

struct Shape3 {
  int c = 0, h = 0, w = 0;
  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
};

// 3x3 convolution, stride 1, zero padding 1. weights [Cout, Cin, 3, 3].
template <typename Real>
void conv3x3_forward(std::span<const Real> in, Shape3 s, std::span<const Real> weights,
                     std::span<const Real> bias, int cout, std::span<Real> out) {
  const int H = s.h, W = s.w;
  const std::size_t P = s.plane();
  for (int co = 0; co < cout; ++co) {
    Real* dst0 = out.data() + co * P;
    std::fill(dst0, dst0 + P, bias[co]);
    for (int ci = 0; ci < s.c; ++ci) {
      const Real* src0 = in.data() + ci * P;
      const Real* w = weights.data() + (static_cast<std::size_t>(co) * s.c + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          const Real wv = w[ky * 3 + kx];
          for (int y = y0; y < y1; ++y) {
            Real* dst = dst0 + y * W;
            const Real* src = src0 + (y + dy) * W + dx;
            for (int x = x0; x < x1; ++x) dst[x] += wv * src[x];
          }
        }
      }
    }
  }
}

// d_in may be empty (first layer).
template <typename Real>
void conv3x3_backward(std::span<const Real> in, Shape3 s, std::span<const Real> weights, int cout,
                      std::span<const Real> d_out, std::span<Real> d_in,
                      std::span<Real> d_weights, std::span<Real> d_bias) {
  const int H = s.h, W = s.w;
  const std::size_t P = s.plane();
  for (int co = 0; co < cout; ++co) {
    const Real* g0 = d_out.data() + co * P;
    Real bsum = 0;
    for (std::size_t i = 0; i < P; ++i) bsum += g0[i];
    d_bias[co] += bsum;
    for (int ci = 0; ci < s.c; ++ci) {
      const Real* src0 = in.data() + ci * P;
      const std::size_t widx = (static_cast<std::size_t>(co) * s.c + ci) * 9;
      const Real* w = weights.data() + widx;
      Real* dw = d_weights.data() + widx;
      Real* din0 = d_in.empty() ? nullptr : d_in.data() + ci * P;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        const int y0 = std::max(0, -dy), y1 = std::min(H, H - dy);
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const int x0 = std::max(0, -dx), x1 = std::min(W, W - dx);
          const Real wv = w[ky * 3 + kx];
          Real acc = 0;
          for (int y = y0; y < y1; ++y) {
            const Real* g = g0 + y * W;
            const Real* src = src0 + (y + dy) * W + dx;
            for (int x = x0; x < x1; ++x) acc += g[x] * src[x];
            if (din0) {
              Real* din = din0 + (y + dy) * W + dx;
              for (int x = x0; x < x1; ++x) din[x] += wv * g[x];
            }
          }
          dw[ky * 3 + kx] += acc;
        }
      }
    }
  }
}

// Per-channel normalization over spatial positions with learnable
// scale/shift (instance normalization).
template <typename Real>
struct NormCache {
  std::vector<Real> xhat;
  std::vector<Real> inv_std;
};

inline constexpr double kNormEps = 1e-5;

template <typename Real>
void norm_forward(std::span<const Real> in, Shape3 s, std::span<const Real> gamma,
                  std::span<const Real> beta, std::span<Real> out, NormCache<Real>& cache) {
  const std::size_t P = s.plane();
  cache.xhat.resize(s.size());
  cache.inv_std.resize(s.c);
  for (int c = 0; c < s.c; ++c) {
    const Real* x = in.data() + c * P;
    Real mean = 0;
    for (std::size_t i = 0; i < P; ++i) mean += x[i];
    mean /= static_cast<Real>(P);
    Real var = 0;
    for (std::size_t i = 0; i < P; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<Real>(P);
    const Real inv = Real(1) / std::sqrt(var + static_cast<Real>(kNormEps));
    cache.inv_std[c] = inv;
    Real* xh = cache.xhat.data() + c * P;
    Real* y = out.data() + c * P;
    for (std::size_t i = 0; i < P; ++i) {
      xh[i] = (x[i] - mean) * inv;
      y[i] = gamma[c] * xh[i] + beta[c];
    }
  }
}

template <typename Real>
void norm_backward(Shape3 s, std::span<const Real> gamma, const NormCache<Real>& cache,
                   std::span<const Real> d_out, std::span<Real> d_in, std::span<Real> d_gamma,
                   std::span<Real> d_beta) {
  const std::size_t P = s.plane();
  const Real n = static_cast<Real>(P);
  for (int c = 0; c < s.c; ++c) {
    const Real* g = d_out.data() + c * P;
    const Real* xh = cache.xhat.data() + c * P;
    Real sum_g = 0, sum_gx = 0;
    for (std::size_t i = 0; i < P; ++i) {
      sum_g += g[i];
      sum_gx += g[i] * xh[i];
    }
    d_gamma[c] += sum_gx;
    d_beta[c] += sum_g;
    const Real k = gamma[c] * cache.inv_std[c] / n;
    Real* dx = d_in.data() + c * P;
    for (std::size_t i = 0; i < P; ++i) dx[i] += k * (n * g[i] - sum_g - xh[i] * sum_gx);
  }
}

template <typename Real>
void relu_forward(std::span<Real> x) {
  for (auto& v : x) v = v > 0 ? v : Real(0);
}

// Multiplies d by the ReLU derivative, given the ReLU output.
template <typename Real>
void relu_backward(std::span<const Real> relu_out, std::span<Real> d) {
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(relu_out[i] > 0)) d[i] = 0;
}

// 2x2 max pool, stride 2. argmax holds the flat input index of each output;
// ties resolve to the first position in raster order.
template <typename Real>
void maxpool2_forward(std::span<const Real> in, Shape3 s, std::span<Real> out,
                      std::vector<std::size_t>& argmax) {
  const int Ho = s.h / 2, Wo = s.w / 2;
  argmax.resize(static_cast<std::size_t>(s.c) * Ho * Wo);
  for (int c = 0; c < s.c; ++c) {
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        std::size_t best = (static_cast<std::size_t>(c) * s.h + 2 * y) * s.w + 2 * x;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (static_cast<std::size_t>(c) * s.h + 2 * y + dy) * s.w + 2 * x + dx;
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (static_cast<std::size_t>(c) * Ho + y) * Wo + x;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
}

template <typename Real>
void maxpool2_backward(std::span<const std::size_t> argmax, std::span<const Real> d_out,
                       std::span<Real> d_in) {
  for (std::size_t o = 0; o < d_out.size(); ++o) d_in[argmax[o]] += d_out[o];
}

}  // namespace schoolmap::layers
