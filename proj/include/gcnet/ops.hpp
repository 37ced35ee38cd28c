#pragma once

// Differentiable tensor operations. Every op validates shapes, computes its
// forward value and records a closure that scatters the output gradient back
// into its inputs.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "gcnet/autograd.hpp"
#include "gcnet/tensor.hpp"

namespace gcnet::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

namespace detail {
inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}
}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result(std::move(out), {a, b}, [a, b](const Tensor<T>& g) {
    accumulate_grad(a.node(), g);
    accumulate_grad(b.node(), g);
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  return make_result(std::move(out), {x}, [x, factor](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index i = 0; i < g.numel(); ++i) (*gx)[i] += factor * g[i];
    }
  });
}

/// y[b, ...] = w[b] * x[b, ...] with w of shape (B).
template <typename T>
Var<T> scale_per_batch(const Var<T>& x, const Var<T>& w) {
  detail::require(x.value().rank() >= 1 && w.value().rank() == 1 && w.dim(0) == x.dim(0),
                  "scale_per_batch: weight shape " + shape_str(w.shape()) +
                      " incompatible with " + shape_str(x.shape()));
  const Index batch = x.dim(0);
  const Index inner = x.numel() / std::max<Index>(batch, 1);
  Tensor<T> out = x.value();
  for (Index b = 0; b < batch; ++b) {
    const T wb = w.value()[b];
    for (Index i = 0; i < inner; ++i) out[b * inner + i] *= wb;
  }
  return make_result(std::move(out), {x, w}, [x, w, batch, inner](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index b = 0; b < batch; ++b) {
        const T wb = w.value()[b];
        for (Index i = 0; i < inner; ++i) (*gx)[b * inner + i] += wb * g[b * inner + i];
      }
    }
    if (auto* gw = grad_target(w.node())) {
      for (Index b = 0; b < batch; ++b) {
        T acc = 0;
        for (Index i = 0; i < inner; ++i) acc += g[b * inner + i] * x.value()[b * inner + i];
        (*gw)[b] += acc;
      }
    }
  });
}

/// Column j of a (B, K) matrix as a (B) vector.
template <typename T>
Var<T> select_column(const Var<T>& m, Index j) {
  detail::require(m.value().rank() == 2 && j >= 0 && j < m.dim(1), "select_column: bad index");
  const Index rows = m.dim(0), cols = m.dim(1);
  Tensor<T> out({rows});
  for (Index r = 0; r < rows; ++r) out[r] = m.value()[r * cols + j];
  return make_result(std::move(out), {m}, [m, j, rows, cols](const Tensor<T>& g) {
    if (auto* gm = grad_target(m.node())) {
      for (Index r = 0; r < rows; ++r) (*gm)[r * cols + j] += g[r];
    }
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [x](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index i = 0; i < g.numel(); ++i) (*gx)[i] += g[i];
    }
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v < T(0) ? T(0) : v;  // NaN passes through
  return make_result(std::move(out), {x}, [x](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index i = 0; i < g.numel(); ++i) {
        if (!(x.value()[i] <= T(0))) (*gx)[i] += g[i];
      }
    }
  });
}

/// x * sigmoid(x); smooth, so finite-difference checks see no kinks.
template <typename T>
Var<T> silu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v / (T(1) + std::exp(-v));
  return make_result(std::move(out), {x}, [x](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index i = 0; i < g.numel(); ++i) {
        const T v = x.value()[i];
        const T s = T(1) / (T(1) + std::exp(-v));
        (*gx)[i] += g[i] * s * (T(1) + v * (T(1) - s));
      }
    }
  });
}

// ---------------------------------------------------------------- dense

/// y = x W^T + b over the last axis; x is (..., in), W is (out, in), b is (out).
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& xs = x.shape();
  detail::require(!xs.empty() && weight.value().rank() == 2 && xs.back() == weight.dim(1),
                  "linear: input " + shape_str(xs) + " vs weight " + shape_str(weight.shape()));
  const Index in = weight.dim(1), out_dim = weight.dim(0);
  detail::require(bias.value().rank() == 1 && bias.dim(0) == out_dim, "linear: bias shape");
  const Index rows = x.numel() / in;
  Shape out_shape = xs;
  out_shape.back() = out_dim;
  Tensor<T> out(out_shape);
  {
    CMapMat<T> X(x.value().data(), rows, in);
    CMapMat<T> W(weight.value().data(), out_dim, in);
    MapMat<T> Y(out.data(), rows, out_dim);
    Y.noalias() = X * W.transpose();
    for (Index r = 0; r < rows; ++r) {
      for (Index o = 0; o < out_dim; ++o) Y(r, o) += bias.value()[o];
    }
  }
  return make_result(std::move(out), {x, weight, bias},
                     [x, weight, bias, rows, in, out_dim](const Tensor<T>& g) {
                       CMapMat<T> G(g.data(), rows, out_dim);
                       if (auto* gx = grad_target(x.node())) {
                         CMapMat<T> W(weight.value().data(), out_dim, in);
                         MapMat<T> GX(gx->data(), rows, in);
                         GX.noalias() += G * W;
                       }
                       if (auto* gw = grad_target(weight.node())) {
                         CMapMat<T> X(x.value().data(), rows, in);
                         MapMat<T> GW(gw->data(), out_dim, in);
                         GW.noalias() += G.transpose() * X;
                       }
                       if (auto* gb = grad_target(bias.node())) {
                         for (Index r = 0; r < rows; ++r) {
                           for (Index o = 0; o < out_dim; ++o) (*gb)[o] += G(r, o);
                         }
                       }
                     });
}

/// Softmax over the last axis.
template <typename T>
Var<T> softmax_last(const Var<T>& x) {
  const Index k = x.shape().back();
  const Index rows = x.numel() / k;
  Tensor<T> out = x.value();
  for (Index r = 0; r < rows; ++r) {
    T* row = out.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T sum = 0;
    for (Index j = 0; j < k; ++j) sum += (row[j] = std::exp(row[j] - mx));
    for (Index j = 0; j < k; ++j) row[j] /= sum;
  }
  Tensor<T> y = out;
  return make_result(std::move(out), {x}, [x, y = std::move(y), rows, k](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index r = 0; r < rows; ++r) {
        T dot = 0;
        for (Index j = 0; j < k; ++j) dot += g[r * k + j] * y[r * k + j];
        for (Index j = 0; j < k; ++j) (*gx)[r * k + j] += y[r * k + j] * (g[r * k + j] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------- spatial

struct ConvGeometry {
  Index stride_h = 1, stride_w = 1;
  Index pad_h = 0, pad_w = 0;
};

/// Same-size padding for an odd kernel at stride 1.
inline ConvGeometry same_padding(Index kh, Index kw) { return {1, 1, kh / 2, kw / 2}; }

/// 2-D cross-correlation. x (B,Ci,H,W), w (Co,Ci,kh,kw), b (Co) -> (B,Co,Ho,Wo).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, ConvGeometry geo) {
  detail::require(x.value().rank() == 4 && weight.value().rank() == 4 &&
                      weight.dim(1) == x.dim(1),
                  "conv2d: input " + shape_str(x.shape()) + " vs weight " +
                      shape_str(weight.shape()));
  const Index batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const Index cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  detail::require(bias.value().rank() == 1 && bias.dim(0) == cout, "conv2d: bias shape");
  const Index out_h = (height + 2 * geo.pad_h - kh) / geo.stride_h + 1;
  const Index out_w = (width + 2 * geo.pad_w - kw) / geo.stride_w + 1;
  detail::require(out_h > 0 && out_w > 0, "conv2d: kernel larger than padded input");
  const Index patch = cin * kh * kw, pixels = out_h * out_w;

  auto im2col = [=](const T* src, T* col) {
    for (Index c = 0; c < cin; ++c) {
      for (Index ky = 0; ky < kh; ++ky) {
        for (Index kx = 0; kx < kw; ++kx) {
          T* row = col + ((c * kh + ky) * kw + kx) * pixels;
          for (Index oy = 0; oy < out_h; ++oy) {
            const Index iy = oy * geo.stride_h - geo.pad_h + ky;
            for (Index ox = 0; ox < out_w; ++ox) {
              const Index ix = ox * geo.stride_w - geo.pad_w + kx;
              row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                         ? src[(c * height + iy) * width + ix]
                                         : T(0);
            }
          }
        }
      }
    }
  };

  Tensor<T> out({batch, cout, out_h, out_w});
  std::vector<T> cols(static_cast<std::size_t>(batch * patch * pixels));
  CMapMat<T> W(weight.value().data(), cout, patch);
  for (Index b = 0; b < batch; ++b) {
    T* col = cols.data() + b * patch * pixels;
    im2col(x.value().data() + b * cin * height * width, col);
    MapMat<T> Y(out.data() + b * cout * pixels, cout, pixels);
    Y.noalias() = W * CMapMat<T>(col, patch, pixels);
    for (Index o = 0; o < cout; ++o) Y.row(o).array() += bias.value()[o];
  }

  return make_result(
      std::move(out), {x, weight, bias},
      [=, cols = std::move(cols)](const Tensor<T>& g) {
        auto* gx = grad_target(x.node());
        auto* gw = grad_target(weight.node());
        auto* gb = grad_target(bias.node());
        std::vector<T> gcol(gx ? static_cast<std::size_t>(patch * pixels) : 0);
        CMapMat<T> W(weight.value().data(), cout, patch);
        for (Index b = 0; b < batch; ++b) {
          CMapMat<T> G(g.data() + b * cout * pixels, cout, pixels);
          if (gw) {
            MapMat<T> GW(gw->data(), cout, patch);
            GW.noalias() += G * CMapMat<T>(cols.data() + b * patch * pixels, patch, pixels).transpose();
          }
          if (gb) {
            for (Index o = 0; o < cout; ++o) (*gb)[o] += G.row(o).sum();
          }
          if (gx) {
            MapMat<T> GC(gcol.data(), patch, pixels);
            GC.noalias() = W.transpose() * G;
            T* dst = gx->data() + b * cin * height * width;
            for (Index c = 0; c < cin; ++c) {
              for (Index ky = 0; ky < kh; ++ky) {
                for (Index kx = 0; kx < kw; ++kx) {
                  const T* row = gcol.data() + ((c * kh + ky) * kw + kx) * pixels;
                  for (Index oy = 0; oy < out_h; ++oy) {
                    const Index iy = oy * geo.stride_h - geo.pad_h + ky;
                    if (iy < 0 || iy >= height) continue;
                    for (Index ox = 0; ox < out_w; ++ox) {
                      const Index ix = ox * geo.stride_w - geo.pad_w + kx;
                      if (ix < 0 || ix >= width) continue;
                      dst[(c * height + iy) * width + ix] += row[oy * out_w + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

/// Running statistics owned by a normalization layer (not trained by gradient).
template <typename T>
struct NormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
};

/// Per-channel batch normalization over (B, H, W). In training mode uses batch
/// statistics and updates `stats`; in evaluation mode uses the frozen stats.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, NormStats<T>& stats,
                    bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::require(x.value().rank() == 4 && gamma.dim(0) == x.dim(1) && beta.dim(0) == x.dim(1),
                  "batch_norm2d: shape " + shape_str(x.shape()));
  const Index batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  const Index count = batch * plane;
  std::vector<T> mean(channels), inv_std(channels);
  const auto& xv = x.value();
  if (training) {
    for (Index c = 0; c < channels; ++c) {
      T s = 0;
      for (Index b = 0; b < batch; ++b) {
        const T* p = xv.data() + (b * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) s += p[i];
      }
      const T m = s / static_cast<T>(count);
      T v = 0;
      for (Index b = 0; b < batch; ++b) {
        const T* p = xv.data() + (b * channels + c) * plane;
        for (Index i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const T var = v / static_cast<T>(count);
      mean[c] = m;
      inv_std[c] = T(1) / std::sqrt(var + eps);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : var;
      stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * m;
      stats.running_var[c] = (T(1) - momentum) * stats.running_var[c] + momentum * unbiased;
    }
  } else {
    for (Index c = 0; c < channels; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + eps);
    }
  }
  Tensor<T> xhat(xv.shape());
  Tensor<T> out(xv.shape());
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index base = (b * channels + c) * plane;
      for (Index i = 0; i < plane; ++i) {
        xhat[base + i] = (xv[base + i] - mean[c]) * inv_std[c];
        out[base + i] = gamma.value()[c] * xhat[base + i] + beta.value()[c];
      }
    }
  }
  return make_result(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor<T>& g) {
        auto* gx = grad_target(x.node());
        auto* gg = grad_target(gamma.node());
        auto* gbeta = grad_target(beta.node());
        for (Index c = 0; c < channels; ++c) {
          T sum_g = 0, sum_gx = 0;
          for (Index b = 0; b < batch; ++b) {
            const Index base = (b * channels + c) * plane;
            for (Index i = 0; i < plane; ++i) {
              sum_g += g[base + i];
              sum_gx += g[base + i] * xhat[base + i];
            }
          }
          if (gg) (*gg)[c] += sum_gx;
          if (gbeta) (*gbeta)[c] += sum_g;
          if (!gx) continue;
          const T gam = gamma.value()[c];
          const T n = static_cast<T>(count);
          for (Index b = 0; b < batch; ++b) {
            const Index base = (b * channels + c) * plane;
            for (Index i = 0; i < plane; ++i) {
              if (training) {
                (*gx)[base + i] += gam * inv_std[c] *
                                   (g[base + i] - sum_g / n - xhat[base + i] * sum_gx / n);
              } else {
                (*gx)[base + i] += gam * inv_std[c] * g[base + i];
              }
            }
          }
        }
      });
}

namespace detail {
struct LerpTap {
  Index lo, hi;
  double w_hi;
};

// Half-pixel-centre sampling (align_corners = false), clamped at the border.
inline std::vector<LerpTap> bilinear_taps(Index in, Index out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}
}  // namespace detail

/// Bilinear resize of (B,C,H,W) to (B,C,out_h,out_w). Identity when sizes match.
template <typename T>
Var<T> bilinear_resize(const Var<T>& x, Index out_h, Index out_w) {
  detail::require(x.value().rank() == 4 && out_h > 0 && out_w > 0,
                  "bilinear_resize: shape " + shape_str(x.shape()));
  const Index planes = x.dim(0) * x.dim(1), in_h = x.dim(2), in_w = x.dim(3);
  if (in_h == out_h && in_w == out_w) return x;
  auto ty = detail::bilinear_taps(in_h, out_h);
  auto tx = detail::bilinear_taps(in_w, out_w);
  Tensor<T> out({x.dim(0), x.dim(1), out_h, out_w});
  for (Index p = 0; p < planes; ++p) {
    const T* src = x.value().data() + p * in_h * in_w;
    T* dst = out.data() + p * out_h * out_w;
    for (Index oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      const T wy = static_cast<T>(a.w_hi);
      for (Index ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const T wx = static_cast<T>(b.w_hi);
        const T top = src[a.lo * in_w + b.lo] * (T(1) - wx) + src[a.lo * in_w + b.hi] * wx;
        const T bot = src[a.hi * in_w + b.lo] * (T(1) - wx) + src[a.hi * in_w + b.hi] * wx;
        dst[oy * out_w + ox] = top * (T(1) - wy) + bot * wy;
      }
    }
  }
  return make_result(std::move(out), {x}, [=](const Tensor<T>& g) {
    auto* gx = grad_target(x.node());
    if (!gx) return;
    for (Index p = 0; p < planes; ++p) {
      T* dst = gx->data() + p * in_h * in_w;
      const T* src = g.data() + p * out_h * out_w;
      for (Index oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        const T wy = static_cast<T>(a.w_hi);
        for (Index ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const T wx = static_cast<T>(b.w_hi);
          const T v = src[oy * out_w + ox];
          dst[a.lo * in_w + b.lo] += v * (T(1) - wy) * (T(1) - wx);
          dst[a.lo * in_w + b.hi] += v * (T(1) - wy) * wx;
          dst[a.hi * in_w + b.lo] += v * wy * (T(1) - wx);
          dst[a.hi * in_w + b.hi] += v * wy * wx;
        }
      }
    }
  });
}

/// Mean over the spatial axes: (B,C,H,W) -> (B,C).
template <typename T>
Var<T> mean_spatial(const Var<T>& x) {
  detail::require(x.value().rank() == 4, "mean_spatial: expects rank 4");
  const Index rows = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({x.dim(0), x.dim(1)});
  for (Index r = 0; r < rows; ++r) {
    T s = 0;
    for (Index i = 0; i < plane; ++i) s += x.value()[r * plane + i];
    out[r] = s / static_cast<T>(plane);
  }
  return make_result(std::move(out), {x}, [x, rows, plane](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index r = 0; r < rows; ++r) {
        const T v = g[r] / static_cast<T>(plane);
        for (Index i = 0; i < plane; ++i) (*gx)[r * plane + i] += v;
      }
    }
  });
}

/// Mean over every axis but the first: (B, ...) -> (B).
template <typename T>
Var<T> mean_per_batch(const Var<T>& x) {
  const Index batch = x.dim(0), inner = x.numel() / std::max<Index>(batch, 1);
  Tensor<T> out({batch});
  for (Index b = 0; b < batch; ++b) {
    T s = 0;
    for (Index i = 0; i < inner; ++i) s += x.value()[b * inner + i];
    out[b] = s / static_cast<T>(inner);
  }
  return make_result(std::move(out), {x}, [x, batch, inner](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < inner; ++i) (*gx)[b * inner + i] += g[b] / static_cast<T>(inner);
      }
    }
  });
}

// ---------------------------------------------------------------- losses

namespace detail {
template <typename T>
void require_pair(const Var<T>& pred, const Tensor<T>& target, const char* what) {
  if (pred.value().rank() != 1 || target.rank() != 1 || pred.dim(0) != target.dim(0)) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(pred.shape()) +
                     " vs target " + shape_str(target.shape()));
  }
  if (pred.dim(0) == 0) throw ShapeError(std::string(what) + ": empty batch");
}
}  // namespace detail

/// (1/B) sum (pred - target)^2 as a scalar of shape (1).
template <typename T>
Var<T> squared_error(const Var<T>& pred, const Tensor<T>& target) {
  detail::require_pair(pred, target, "squared_error");
  const Index n = pred.dim(0);
  T s = 0;
  for (Index i = 0; i < n; ++i) s += (pred.value()[i] - target[i]) * (pred.value()[i] - target[i]);
  Tensor<T> out({1}, s / static_cast<T>(n));
  return make_result(std::move(out), {pred}, [pred, target, n](const Tensor<T>& g) {
    if (auto* gp = grad_target(pred.node())) {
      for (Index i = 0; i < n; ++i) {
        (*gp)[i] += g[0] * T(2) * (pred.value()[i] - target[i]) / static_cast<T>(n);
      }
    }
  });
}

/// (1/B) sum |pred - target| as a scalar of shape (1).
template <typename T>
Var<T> absolute_error(const Var<T>& pred, const Tensor<T>& target) {
  detail::require_pair(pred, target, "absolute_error");
  const Index n = pred.dim(0);
  T s = 0;
  for (Index i = 0; i < n; ++i) s += std::abs(pred.value()[i] - target[i]);
  Tensor<T> out({1}, s / static_cast<T>(n));
  return make_result(std::move(out), {pred}, [pred, target, n](const Tensor<T>& g) {
    if (auto* gp = grad_target(pred.node())) {
      for (Index i = 0; i < n; ++i) {
        const T d = pred.value()[i] - target[i];
        const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        (*gp)[i] += g[0] * sign / static_cast<T>(n);
      }
    }
  });
}

}  // namespace gcnet::ops
