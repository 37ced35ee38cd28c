#pragma once

// Location-aware counter: the similarity map weights every pixel's feature
// vector and the weighted sum (a 1 x hw by hw x C product) becomes a
// resolution-independent embedding that an MLP regresses to a count.

#include <string>
#include <vector>

#include "gcnet/dass.hpp"

namespace gcnet {

/// (B, C) embedding; same shape for any spatial resolution.
template <typename T>
struct CountEmbedding {
  Var<T> data;
};

/// (B) unconstrained count; clamp only when reporting.
template <typename T>
struct CountPrediction {
  Var<T> data;
};

/// X_c = sum_p S(p) F(p, c).
template <typename T>
CountEmbedding<T> pool_correlation(const FeatureMap<T>& features, const SimilarityMap<T>& sim) {
  const auto& f = features.data;
  const auto& s = sim.data;
  if (s.value().rank() != 3 || s.dim(0) != features.batch() || s.dim(1) != features.height() ||
      s.dim(2) != features.width()) {
    throw ShapeError("pool_correlation: similarity " + shape_str(s.shape()) + " vs features " +
                     shape_str(f.shape()));
  }
  const Index batch = features.batch(), c = features.channels();
  const Index hw = features.height() * features.width();
  Tensor<T> out({batch, c});
  for (Index b = 0; b < batch; ++b) {
    ops::CMapMat<T> F(f.value().data() + b * c * hw, c, hw);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> sv(s.value().data() + b * hw, hw);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> x(out.data() + b * c, c);
    x.noalias() = F * sv;
  }
  return CountEmbedding<T>{make_result(std::move(out), {f, s}, [f, s, batch, c, hw](const Tensor<T>& g) {
    auto* gf = grad_target(f.node());
    auto* gs = grad_target(s.node());
    for (Index b = 0; b < batch; ++b) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> gx(g.data() + b * c, c);
      if (gf) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> sv(s.value().data() + b * hw, hw);
        ops::MapMat<T> GF(gf->data() + b * c * hw, c, hw);
        GF.noalias() += gx * sv;
      }
      if (gs) {
        ops::CMapMat<T> F(f.value().data() + b * c * hw, c, hw);
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> GS(gs->data() + b * hw, hw);
        GS.noalias() += F.transpose() * gx;
      }
    }
  })};
}

/// Fully connected layers (default widths 64, 32, 1) with ReLU between them.
template <typename T>
struct RegressionHeadParams {
  std::vector<LinearLayer<T>> layers;

  RegressionHeadParams() = default;
  RegressionHeadParams(Index in, const std::vector<Index>& widths, Rng& rng) {
    for (Index w : widths) {
      layers.emplace_back(in, w, rng);
      in = w;
    }
  }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".fc" + std::to_string(i), fn);
  }
};

template <typename T>
CountPrediction<T> regress_count(const CountEmbedding<T>& embedding, const RegressionHeadParams<T>& head) {
  Var<T> x = embedding.data;
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    x = head.layers[i](x);
    if (i + 1 < head.layers.size()) x = ops::relu(x);
  }
  return CountPrediction<T>{ops::reshape(x, {x.dim(0)})};
}

/// Count path used when the similarity map is built but the location-aware
/// counter is disabled: scale * mean_p S(p) + offset.
template <typename T>
struct GapCounterParams {
  Var<T> scale;
  Var<T> offset;

  GapCounterParams() : scale(Var<T>::leaf(Tensor<T>({1}, T(1)), true)), offset(make_param<T>({1})) {}

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".scale", scale);
    fn(prefix + ".offset", offset);
  }
};

template <typename T>
CountPrediction<T> gap_count(const SimilarityMap<T>& sim, const GapCounterParams<T>& p) {
  auto pooled = ops::reshape(ops::mean_per_batch(sim.data), {sim.data.dim(0), 1});
  auto w = ops::reshape(p.scale, {1, 1});
  return CountPrediction<T>{ops::reshape(ops::linear(pooled, w, p.offset), {sim.data.dim(0)})};
}

}  // namespace gcnet
