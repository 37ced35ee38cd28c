#pragma once

// Random inputs and naive loop references shared by the unit tests and the
// acceptance runner. Every reference here is written with explicit index
// arithmetic and never calls into the library's compute paths.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "gcnet/model.hpp"

namespace gcnet::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
Var<T> random_var(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  return Var<T>::leaf(random_tensor<T>(std::move(shape), rng, lo, hi));
}

/// Max |a - b| with b promoted to double.
template <typename A, typename B>
double max_abs_error(const Tensor<A>& a, const Tensor<B>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

/// Reference tensors are computed in double from the (possibly float) inputs.
template <typename T>
Tensor<double> widen(const Tensor<T>& t) {
  return t.template cast<double>();
}

// ---------------------------------------------------------------- references

/// (B,C,G,G) -> (B, n, C, K, K), windows in row-major order.
inline Tensor<double> ref_unfold(const Tensor<double>& x, Index k, Index s) {
  const Index B = x.dim(0), C = x.dim(1), G = x.dim(2);
  const Index per = (G - k) / s + 1;
  Tensor<double> out({B, per * per, C, k, k});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < per; ++i)
      for (Index j = 0; j < per; ++j)
        for (Index c = 0; c < C; ++c)
          for (Index u = 0; u < k; ++u)
            for (Index v = 0; v < k; ++v) out.at(b, i * per + j, c, u, v) = x.at(b, c, i * s + u, j * s + v);
  return out;
}

inline Tensor<double> ref_average(const Tensor<double>& p) {
  const Index B = p.dim(0), n = p.dim(1), C = p.dim(2), K = p.dim(3);
  Tensor<double> out({B, C, K, K});
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index u = 0; u < K; ++u)
        for (Index v = 0; v < K; ++v) {
          double acc = 0;
          for (Index i = 0; i < n; ++i) acc += p.at(b, i, c, u, v);
          out.at(b, c, u, v) = acc / static_cast<double>(n);
        }
  return out;
}

/// Slice each sub x sub block, flatten as (c, dy, dx), then y = W f + b.
inline Tensor<double> ref_tokenize(const Tensor<double>& patch, const Tensor<double>& w, const Tensor<double>& bias,
                                   Index sub) {
  const Index B = patch.dim(0), C = patch.dim(1), K = patch.dim(2), per = K / sub;
  const Index out_c = w.dim(0);
  Tensor<double> out({B, per * per, out_c});
  for (Index b = 0; b < B; ++b)
    for (Index sy = 0; sy < per; ++sy)
      for (Index sx = 0; sx < per; ++sx) {
        std::vector<double> flat;
        for (Index c = 0; c < C; ++c)
          for (Index dy = 0; dy < sub; ++dy)
            for (Index dx = 0; dx < sub; ++dx) flat.push_back(patch.at(b, c, sy * sub + dy, sx * sub + dx));
        for (Index o = 0; o < out_c; ++o) {
          double acc = bias[o];
          for (std::size_t f = 0; f < flat.size(); ++f) acc += w.at(o, static_cast<Index>(f)) * flat[f];
          out.at(b, sy * per + sx, o) = acc;
        }
      }
  return out;
}

/// Direct sliding-window cross-correlation with zero padding.
inline Tensor<double> ref_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& bias,
                               Index stride, Index pad_h, Index pad_w) {
  const Index B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const Index Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index Ho = (H + 2 * pad_h - kh) / stride + 1, Wo = (W + 2 * pad_w - kw) / stride + 1;
  Tensor<double> out({B, Co, Ho, Wo});
  for (Index b = 0; b < B; ++b)
    for (Index o = 0; o < Co; ++o)
      for (Index y = 0; y < Ho; ++y)
        for (Index xx = 0; xx < Wo; ++xx) {
          double acc = bias.numel() ? bias[o] : 0.0;
          for (Index c = 0; c < Ci; ++c)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index iy = y * stride - pad_h + u, ix = xx * stride - pad_w + v;
                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                acc += w.at(o, c, u, v) * x.at(b, c, iy, ix);
              }
          out.at(b, o, y, xx) = acc;
        }
  return out;
}

inline Tensor<double> ref_gram(const Tensor<double>& f) {
  const Index B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  Tensor<double> out({B, C, C});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < C; ++i)
      for (Index j = 0; j < C; ++j) {
        double acc = 0;
        for (Index y = 0; y < H; ++y)
          for (Index x = 0; x < W; ++x) acc += f.at(b, i, y, x) * f.at(b, j, y, x);
        out.at(b, i, j) = acc;
      }
  return out;
}

/// Token t scaled by (1 + e_t).
inline Tensor<double> ref_recalibrate(const Tensor<double>& tok, const Tensor<double>& e) {
  Tensor<double> out(tok.shape());
  for (Index b = 0; b < tok.dim(0); ++b)
    for (Index t = 0; t < tok.dim(1); ++t)
      for (Index c = 0; c < tok.dim(2); ++c) out.at(b, t, c) = e.at(b, t) * tok.at(b, t, c) + tok.at(b, t, c);
  return out;
}

/// S(p) = (1/T) sum_t sum_c F(c, p) token(t, c), one dot product at a time.
inline Tensor<double> ref_similarity(const Tensor<double>& f, const Tensor<double>& tok) {
  const Index B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3), nt = tok.dim(1);
  Tensor<double> out({B, H, W});
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        double acc = 0;
        for (Index t = 0; t < nt; ++t) {
          double dot = 0;
          for (Index c = 0; c < C; ++c) dot += f.at(b, c, y, x) * tok.at(b, t, c);
          acc += dot;
        }
        out.at(b, y, x) = acc / static_cast<double>(nt);
      }
  return out;
}

inline Tensor<double> ref_pool(const Tensor<double>& f, const Tensor<double>& s) {
  const Index B = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  Tensor<double> out({B, C});
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c) {
      double acc = 0;
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) acc += s.at(b, y, x) * f.at(b, c, y, x);
      out.at(b, c) = acc;
    }
  return out;
}

/// Row of y = W x + b.
inline std::vector<double> ref_affine(const Tensor<double>& w, const Tensor<double>& b, const std::vector<double>& x) {
  std::vector<double> y(static_cast<std::size_t>(w.dim(0)));
  for (Index o = 0; o < w.dim(0); ++o) {
    double acc = b[o];
    for (Index i = 0; i < w.dim(1); ++i) acc += w.at(o, i) * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

inline std::vector<double> ref_softmax(std::vector<double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0;
  for (auto& v : z) s += (v = std::exp(v - m));
  for (auto& v : z) v /= s;
  return z;
}

inline double ref_silu(double x) { return x / (1 + std::exp(-x)); }

}  // namespace gcnet::testing
