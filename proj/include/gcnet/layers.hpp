#pragma once

// Parameter holders shared by the network modules. Each exposes
// visit(prefix, fn) with fn(name, Var<T>&) so that checkpointing, optimizers
// and parameter counting walk parameters under canonical dotted names.

#include <cmath>
#include <string>

#include "gcnet/autograd.hpp"
#include "gcnet/ops.hpp"
#include "gcnet/rng.hpp"

namespace gcnet {

template <typename T>
Var<T> make_param(Shape shape) {
  return Var<T>::leaf(Tensor<T>(std::move(shape)), true);
}

template <typename T>
void fill_uniform(Var<T>& p, Rng& rng, double bound) {
  for (auto& v : p.mutable_value().values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
struct Conv2dLayer {
  Var<T> weight;  // (out, in, kh, kw)
  Var<T> bias;    // (out); a constant zero when has_bias is false
  bool has_bias = true;

  Conv2dLayer() = default;
  Conv2dLayer(Index in, Index out, Index kh, Index kw, Rng& rng, bool with_bias = true)
      : weight(make_param<T>({out, in, kh, kw})),
        bias(Var<T>::leaf(Tensor<T>({out}), with_bias)),
        has_bias(with_bias) {
    // He-uniform for the weights, zero bias.
    fill_uniform(weight, rng, std::sqrt(6.0 / static_cast<double>(in * kh * kw)));
  }

  Var<T> operator()(const Var<T>& x, ops::ConvGeometry geo) const {
    return ops::conv2d(x, weight, bias, geo);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".weight", weight);
    if (has_bias) fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct LinearLayer {
  Var<T> weight;  // (out, in)
  Var<T> bias;    // (out)

  LinearLayer() = default;
  LinearLayer(Index in, Index out, Rng& rng)
      : weight(make_param<T>({out, in})), bias(make_param<T>({out})) {
    fill_uniform(weight, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  }

  Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
  }
};

template <typename T>
struct BatchNormLayer {
  Var<T> gamma;
  Var<T> beta;
  ops::NormStats<T> stats;

  BatchNormLayer() = default;
  explicit BatchNormLayer(Index channels)
      : gamma(Var<T>::leaf(Tensor<T>({channels}, T(1)), true)),
        beta(make_param<T>({channels})),
        stats{Tensor<T>({channels}, T(0)), Tensor<T>({channels}, T(1))} {}

  Var<T> operator()(const Var<T>& x, bool training) {
    return ops::batch_norm2d(x, gamma, beta, stats, training);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }

  template <typename F>
  void visit_buffers(const std::string& prefix, F&& fn) {
    fn(prefix + ".running_mean", stats.running_mean);
    fn(prefix + ".running_var", stats.running_var);
  }
};

}  // namespace gcnet
