#pragma once

// Dual-attention self-similarity learning.
//
// Features F (B,C,h,w) are probed by three anisotropic convolutions
// (horizontal 1xk, vertical kx1, channel 1x1). The exemplar tokens choose
// soft direction weights (alpha, beta, gamma) for those responses; the
// channel Gram matrix of F in turn chooses per-token weights e_t for the
// exemplar. The recalibrated pair is contracted into a per-pixel similarity.

#include <string>

#include "gcnet/backbone.hpp"
#include "gcnet/exemplar_sim.hpp"
#include "gcnet/layers.hpp"

namespace gcnet {

template <typename T>
struct AnisotropicFeatures {
  FeatureMap<T> horizontal;
  FeatureMap<T> vertical;
  FeatureMap<T> basis;
};

/// (B, 3) softmax weights: columns alpha, beta, gamma.
template <typename T>
struct DirectionWeights {
  Var<T> data;
};

/// (B, C, C) channel self-similarity.
template <typename T>
struct GramMatrix {
  Var<T> data;
};

/// (B, T) softmax weights over exemplar tokens.
template <typename T>
struct TokenWeights {
  Var<T> data;
};

/// (B, h, w) per-pixel self-similarity.
template <typename T>
struct SimilarityMap {
  Var<T> data;

  Index height() const { return data.dim(1); }
  Index width() const { return data.dim(2); }
};

template <typename T>
struct DassParams {
  Conv2dLayer<T> horizontal;   // (C, C, 1, kh)
  Conv2dLayer<T> vertical;     // (C, C, kv, 1)
  Conv2dLayer<T> basis;        // (C, C, 1, 1)
  Conv2dLayer<T> integration;  // (C, C, 3, 3)
  LinearLayer<T> direction_hidden;  // T*C -> hidden
  LinearLayer<T> direction_out;     // hidden -> 3
  LinearLayer<T> token_head;        // C -> T

  DassParams() = default;
  DassParams(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 3));
    const Index c = cfg.channels;
    horizontal = Conv2dLayer<T>(c, c, 1, cfg.aniso_kernel_h, rng);
    vertical = Conv2dLayer<T>(c, c, cfg.aniso_kernel_v, 1, rng);
    basis = Conv2dLayer<T>(c, c, 1, 1, rng);
    integration = Conv2dLayer<T>(c, c, cfg.integration_kernel, cfg.integration_kernel, rng);
    direction_hidden = LinearLayer<T>(cfg.token_count() * c, cfg.direction_hidden, rng);
    direction_out = LinearLayer<T>(cfg.direction_hidden, 3, rng);
    token_head = LinearLayer<T>(c, cfg.token_count(), rng);
  }

  template <typename F>
  void visit_anisotropic(const std::string& prefix, F&& fn) {
    horizontal.visit(prefix + ".horizontal", fn);
    vertical.visit(prefix + ".vertical", fn);
    basis.visit(prefix + ".basis", fn);
  }
  template <typename F>
  void visit_integration(const std::string& prefix, F&& fn) {
    integration.visit(prefix + ".integration", fn);
  }
  template <typename F>
  void visit_condenser(const std::string& prefix, F&& fn) {
    direction_hidden.visit(prefix + ".direction_hidden", fn);
    direction_out.visit(prefix + ".direction_out", fn);
    token_head.visit(prefix + ".token_head", fn);
  }
  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    visit_anisotropic(prefix, fn);
    visit_integration(prefix, fn);
    visit_condenser(prefix, fn);
  }
};

template <typename T>
AnisotropicFeatures<T> anisotropic_encode(const FeatureMap<T>& f, const DassParams<T>& p) {
  const Index kh = p.horizontal.weight.dim(3), kv = p.vertical.weight.dim(2);
  return {
      FeatureMap<T>{p.horizontal(f.data, ops::same_padding(1, kh)), f.stride},
      FeatureMap<T>{p.vertical(f.data, ops::same_padding(kv, 1)), f.stride},
      FeatureMap<T>{p.basis(f.data, ops::same_padding(1, 1)), f.stride},
  };
}

/// Token MLP (T*C -> hidden -> 3) followed by softmax.
template <typename T>
DirectionWeights<T> direction_weights(const ExemplarToken<T>& token, const DassParams<T>& p) {
  if (token.count() * token.channels() != p.direction_hidden.weight.dim(1)) {
    throw ShapeError("direction_weights: token flat size " +
                     std::to_string(token.count() * token.channels()) + " != MLP input " +
                     std::to_string(p.direction_hidden.weight.dim(1)));
  }
  auto h = ops::relu(p.direction_hidden(token.flat()));
  return DirectionWeights<T>{ops::softmax_last(p.direction_out(h))};
}

/// Constant alpha = beta = gamma = 1/3.
template <typename T>
DirectionWeights<T> uniform_direction_weights(Index batch) {
  return DirectionWeights<T>{Var<T>::leaf(Tensor<T>({batch, 3}, T(1) / T(3)))};
}

/// W * (f + alpha H + beta V + gamma B) with a same-padded integration conv.
template <typename T>
FeatureMap<T> integrate_features(const FeatureMap<T>& f, const AnisotropicFeatures<T>& aniso,
                                 const DirectionWeights<T>& dw, const DassParams<T>& p) {
  for (const auto* m : {&aniso.horizontal, &aniso.vertical, &aniso.basis}) {
    if (m->data.shape() != f.data.shape()) {
      throw ShapeError("integrate_features: anisotropic map " + shape_str(m->data.shape()) +
                       " vs features " + shape_str(f.data.shape()));
    }
  }
  if (dw.data.value().rank() != 2 || dw.data.dim(0) != f.batch() || dw.data.dim(1) != 3) {
    throw ShapeError("integrate_features: direction weights " + shape_str(dw.data.shape()));
  }
  auto sum = ops::add(f.data, ops::scale_per_batch(aniso.horizontal.data, ops::select_column(dw.data, 0)));
  sum = ops::add(sum, ops::scale_per_batch(aniso.vertical.data, ops::select_column(dw.data, 1)));
  sum = ops::add(sum, ops::scale_per_batch(aniso.basis.data, ops::select_column(dw.data, 2)));
  const Index k = p.integration.weight.dim(2);
  return FeatureMap<T>{p.integration(sum, ops::same_padding(k, k)), f.stride};
}

/// Integration with the anisotropic branch removed: W * f.
template <typename T>
FeatureMap<T> integrate_plain(const FeatureMap<T>& f, const DassParams<T>& p) {
  const Index k = p.integration.weight.dim(2);
  return FeatureMap<T>{p.integration(f.data, ops::same_padding(k, k)), f.stride};
}

/// F F^T per batch element with F viewed as (C, h*w).
template <typename T>
GramMatrix<T> gram_matrix(const FeatureMap<T>& f) {
  const auto& x = f.data;
  const Index batch = f.batch(), c = f.channels(), hw = f.height() * f.width();
  Tensor<T> out({batch, c, c});
  for (Index b = 0; b < batch; ++b) {
    ops::CMapMat<T> F(x.value().data() + b * c * hw, c, hw);
    ops::MapMat<T> G(out.data() + b * c * c, c, c);
    G.noalias() = F * F.transpose();
  }
  return GramMatrix<T>{make_result(std::move(out), {x}, [x, batch, c, hw](const Tensor<T>& g) {
    if (auto* gx = grad_target(x.node())) {
      for (Index b = 0; b < batch; ++b) {
        ops::CMapMat<T> F(x.value().data() + b * c * hw, c, hw);
        ops::CMapMat<T> G(g.data() + b * c * c, c, c);
        ops::MapMat<T> GX(gx->data() + b * c * hw, c, hw);
        GX.noalias() += (G + G.transpose()) * F;
      }
    }
  })};
}

/// Row-mean of the Gram matrix (C-vector), linear C -> T, softmax.
template <typename T>
TokenWeights<T> token_weights(const GramMatrix<T>& gram, const DassParams<T>& p) {
  const auto& g = gram.data;
  if (g.value().rank() != 3 || g.dim(1) != g.dim(2) || g.dim(1) != p.token_head.weight.dim(1)) {
    throw ShapeError("token_weights: gram " + shape_str(g.shape()));
  }
  const Index batch = g.dim(0), c = g.dim(1);
  Tensor<T> pooled({batch, c});
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < c; ++i) {
      T s = 0;
      for (Index j = 0; j < c; ++j) s += g.value()[(b * c + i) * c + j];
      pooled[b * c + i] = s / static_cast<T>(c);
    }
  }
  auto row_mean = make_result(std::move(pooled), {g}, [g, batch, c](const Tensor<T>& gr) {
    if (auto* gg = grad_target(g.node())) {
      for (Index b = 0; b < batch; ++b) {
        for (Index i = 0; i < c; ++i) {
          for (Index j = 0; j < c; ++j) (*gg)[(b * c + i) * c + j] += gr[b * c + i] / static_cast<T>(c);
        }
      }
    }
  });
  return TokenWeights<T>{ops::softmax_last(p.token_head(row_mean))};
}

/// Constant e_t = 1/T.
template <typename T>
TokenWeights<T> uniform_token_weights(Index batch, Index tokens) {
  return TokenWeights<T>{Var<T>::leaf(Tensor<T>({batch, tokens}, T(1) / static_cast<T>(tokens)))};
}

/// concat(e_1 T_1, ..., e_T T_T) + T on the flat token view.
template <typename T>
ExemplarToken<T> recalibrate_token(const ExemplarToken<T>& token, const TokenWeights<T>& weights) {
  const auto& x = token.tokens;
  const auto& e = weights.data;
  if (e.value().rank() != 2 || e.dim(0) != token.batch() || e.dim(1) != token.count()) {
    throw ShapeError("recalibrate_token: weights " + shape_str(e.shape()) + " vs tokens " +
                     shape_str(x.shape()));
  }
  const Index rows = token.batch() * token.count(), c = token.channels();
  Tensor<T> out(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const T scale = e.value()[r] + T(1);
    for (Index k = 0; k < c; ++k) out[r * c + k] = x.value()[r * c + k] * scale;
  }
  return ExemplarToken<T>{make_result(std::move(out), {x, e}, [x, e, rows, c](const Tensor<T>& g) {
    auto* gx = grad_target(x.node());
    auto* ge = grad_target(e.node());
    for (Index r = 0; r < rows; ++r) {
      T acc = 0;
      for (Index k = 0; k < c; ++k) {
        if (gx) (*gx)[r * c + k] += g[r * c + k] * (e.value()[r] + T(1));
        acc += g[r * c + k] * x.value()[r * c + k];
      }
      if (ge) (*ge)[r] += acc;
    }
  })};
}

/// S(p) = (1/T) sum_t <F(p), token_t>.
template <typename T>
SimilarityMap<T> similarity_map(const FeatureMap<T>& features, const ExemplarToken<T>& token) {
  const auto& f = features.data;
  const auto& tk = token.tokens;
  if (features.channels() != token.channels() || features.batch() != token.batch()) {
    throw ShapeError("similarity_map: features " + shape_str(f.shape()) + " vs tokens " +
                     shape_str(tk.shape()));
  }
  const Index batch = features.batch(), c = features.channels(), nt = token.count();
  const Index hw = features.height() * features.width();
  // Mean token per batch element; S = mean_token^T F.
  auto mean_token = [=](const Tensor<T>& tv) {
    Tensor<T> m({batch, c});
    for (Index b = 0; b < batch; ++b) {
      for (Index t = 0; t < nt; ++t) {
        for (Index k = 0; k < c; ++k) m[b * c + k] += tv[(b * nt + t) * c + k];
      }
    }
    for (auto& v : m.values()) v /= static_cast<T>(nt);
    return m;
  };
  Tensor<T> tbar = mean_token(tk.value());
  Tensor<T> out({batch, features.height(), features.width()});
  for (Index b = 0; b < batch; ++b) {
    ops::CMapMat<T> F(f.value().data() + b * c * hw, c, hw);
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> tb(tbar.data() + b * c, c);
    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> s(out.data() + b * hw, hw);
    s.noalias() = tb * F;
  }
  return SimilarityMap<T>{make_result(
      std::move(out), {f, tk}, [f, tk, tbar = std::move(tbar), batch, c, nt, hw](const Tensor<T>& g) {
        auto* gf = grad_target(f.node());
        auto* gt = grad_target(tk.node());
        for (Index b = 0; b < batch; ++b) {
          Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> gs(g.data() + b * hw, hw);
          if (gf) {
            Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> tb(tbar.data() + b * c, c);
            ops::MapMat<T> GF(gf->data() + b * c * hw, c, hw);
            GF.noalias() += tb * gs;
          }
          if (gt) {
            ops::CMapMat<T> F(f.value().data() + b * c * hw, c, hw);
            Eigen::Matrix<T, Eigen::Dynamic, 1> d = F * gs.transpose();
            for (Index t = 0; t < nt; ++t) {
              for (Index k = 0; k < c; ++k) (*gt)[(b * nt + t) * c + k] += d(k) / static_cast<T>(nt);
            }
          }
        }
      })};
}

}  // namespace gcnet
