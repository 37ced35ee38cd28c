#pragma once

// Pseudo exemplar simulator: every stride-s window of the exemplar feature
// grid is treated as a candidate exemplar, the windows are averaged into a
// single K x K patch, and that patch is cut into non-overlapping sub-patches
// that become tokens through one shared linear projection.
//
// Orderings (all row-major):
//   patches    index i = wy * windows_per_side + wx
//   tokens     index t = sy * (K / sub) + sx
//   token feat index f = (c * sub + dy) * sub + dx

#include <string>

#include "gcnet/backbone.hpp"
#include "gcnet/layers.hpp"

namespace gcnet {

/// (B, n, C, K, K) window copies of an exemplar grid.
template <typename T>
struct PatchSet {
  Var<T> data;

  Index count() const { return data.dim(1); }
  Index kernel() const { return data.dim(3); }
};

/// (B, C, K, K) mean of a PatchSet.
template <typename T>
struct ExemplarPatch {
  Var<T> data;
};

/// (B, T, C) tokens; the flat (B, T*C) view concatenates them in token order.
template <typename T>
struct ExemplarToken {
  Var<T> tokens;

  Index batch() const { return tokens.dim(0); }
  Index count() const { return tokens.dim(1); }
  Index channels() const { return tokens.dim(2); }
  Var<T> flat() const { return ops::reshape(tokens, {batch(), count() * channels()}); }
};

/// Shared sub-patch projection (sub^2 * C -> C).
template <typename T>
using TokenProjectionParams = LinearLayer<T>;

inline Index windows_per_side(Index grid, Index kernel, Index stride) {
  if (kernel < 1 || kernel > grid) {
    throw GeometryError("unfold kernel " + std::to_string(kernel) + " does not fit grid side " +
                        std::to_string(grid));
  }
  if (stride < 1) throw GeometryError("unfold stride must be >= 1");
  return (grid - kernel) / stride + 1;
}

template <typename T>
PatchSet<T> unfold_patches(const ExemplarFeatureGrid<T>& grid, Index kernel, Index stride) {
  const auto& x = grid.data;
  if (x.value().rank() != 4 || x.dim(2) != x.dim(3)) {
    throw ShapeError("unfold_patches expects a square (B,C,G,G) grid, got " + shape_str(x.shape()));
  }
  const Index batch = x.dim(0), channels = x.dim(1), side = x.dim(2);
  const Index per_side = windows_per_side(side, kernel, stride);
  const Index n = per_side * per_side;
  const Index patch_size = channels * kernel * kernel;

  // out[b][i][c][ky][kx] = x[b][c][wy*stride + ky][wx*stride + kx]
  auto for_each_tap = [=](auto&& fn) {
    for (Index b = 0; b < batch; ++b) {
      for (Index wy = 0; wy < per_side; ++wy) {
        for (Index wx = 0; wx < per_side; ++wx) {
          const Index dst_base = (b * n + wy * per_side + wx) * patch_size;
          for (Index c = 0; c < channels; ++c) {
            for (Index ky = 0; ky < kernel; ++ky) {
              const Index src_row = ((b * channels + c) * side + wy * stride + ky) * side + wx * stride;
              const Index dst_row = dst_base + (c * kernel + ky) * kernel;
              for (Index kx = 0; kx < kernel; ++kx) fn(dst_row + kx, src_row + kx);
            }
          }
        }
      }
    }
  };

  Tensor<T> out({batch, n, channels, kernel, kernel});
  for_each_tap([&](Index dst, Index src) { out[dst] = x.value()[src]; });
  return PatchSet<T>{make_result(std::move(out), {x}, [x, for_each_tap](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for_each_tap([&](Index dst, Index src) { (*gx)[src] += g[dst]; });
    }
  })};
}

/// Uniform mean over the patch axis.
template <typename T>
ExemplarPatch<T> average_patches(const PatchSet<T>& patches) {
  const auto& x = patches.data;
  if (x.value().rank() != 5 || x.dim(1) < 1) {
    throw ShapeError("average_patches expects (B,n>=1,C,K,K), got " + shape_str(x.shape()));
  }
  const Index batch = x.dim(0), n = x.dim(1);
  const Index inner = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<T> out({batch, x.dim(2), x.dim(3), x.dim(4)});
  for (Index b = 0; b < batch; ++b) {
    T* dst = out.data() + b * inner;
    for (Index i = 0; i < n; ++i) {
      const T* src = x.value().data() + (b * n + i) * inner;
      for (Index k = 0; k < inner; ++k) dst[k] += src[k];
    }
    for (Index k = 0; k < inner; ++k) dst[k] /= static_cast<T>(n);
  }
  return ExemplarPatch<T>{make_result(std::move(out), {x}, [x, batch, n, inner](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < n; ++i) {
          T* dst = gx->data() + (b * n + i) * inner;
          for (Index k = 0; k < inner; ++k) dst[k] += g[b * inner + k] / static_cast<T>(n);
        }
      }
    }
  })};
}

/// Rearranges (B, C, K, K) into (B, (K/sub)^2, sub*sub*C) sub-patch vectors.
template <typename T>
Var<T> split_sub_patches(const Var<T>& patch, Index sub) {
  if (patch.value().rank() != 4 || patch.dim(2) != patch.dim(3)) {
    throw ShapeError("split_sub_patches expects (B,C,K,K), got " + shape_str(patch.shape()));
  }
  const Index batch = patch.dim(0), channels = patch.dim(1), kernel = patch.dim(2);
  if (sub < 1 || kernel % sub != 0) {
    throw GeometryError("patch side " + std::to_string(kernel) + " is not divisible by sub-patch " +
                        std::to_string(sub));
  }
  const Index per_side = kernel / sub, tokens = per_side * per_side, feat = sub * sub * channels;

  auto for_each_tap = [=](auto&& fn) {
    for (Index b = 0; b < batch; ++b) {
      for (Index sy = 0; sy < per_side; ++sy) {
        for (Index sx = 0; sx < per_side; ++sx) {
          const Index dst_base = (b * tokens + sy * per_side + sx) * feat;
          for (Index c = 0; c < channels; ++c) {
            for (Index dy = 0; dy < sub; ++dy) {
              for (Index dx = 0; dx < sub; ++dx) {
                const Index src = ((b * channels + c) * kernel + sy * sub + dy) * kernel + sx * sub + dx;
                fn(dst_base + (c * sub + dy) * sub + dx, src);
              }
            }
          }
        }
      }
    }
  };

  Tensor<T> out({batch, tokens, feat});
  for_each_tap([&](Index dst, Index src) { out[dst] = patch.value()[src]; });
  return make_result(std::move(out), {patch}, [patch, for_each_tap](const Tensor<T>& g) {
    if (auto* gp = grad_target(patch.node())) {
      for_each_tap([&](Index dst, Index src) { (*gp)[src] += g[dst]; });
    }
  });
}

/// Cuts the averaged patch into (K/sub)^2 sub-patches and projects each to C.
template <typename T>
ExemplarToken<T> tokenize_exemplar(const ExemplarPatch<T>& patch, const TokenProjectionParams<T>& proj,
                                   Index sub = 2) {
  if (patch.data.value().rank() == 4 && patch.data.dim(2) % 2 != 0) {
    throw GeometryError("tokenize_exemplar requires an even patch side, got " +
                        std::to_string(patch.data.dim(2)));
  }
  return ExemplarToken<T>{proj(split_sub_patches(patch.data, sub))};
}

/// Full simulator: grid -> unfold -> average -> tokens.
template <typename T>
ExemplarToken<T> simulate_exemplar(const ExemplarFeatureGrid<T>& grid,
                                   const TokenProjectionParams<T>& proj, const ModelConfig& cfg) {
  auto patches = unfold_patches(grid, cfg.unfold_kernel, cfg.unfold_stride);
  return tokenize_exemplar(average_patches(patches), proj, cfg.sub_patch);
}

}  // namespace gcnet
