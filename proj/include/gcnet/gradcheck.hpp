#pragma once

// Central finite-difference checks of the reverse-mode gradients, per module
// and for the full network, in double precision.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gcnet/model.hpp"
#include "gcnet/train_eval.hpp"

namespace gcnet {

struct GradCheckResult {
  std::string module;
  double max_rel_error = 0;
  std::string worst;  // "<name>[<flat index>]"
  double worst_analytic = 0;
  double worst_numeric = 0;
  Index checked = 0;  // scalars compared
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is zero from turning rounding noise into a large ratio.
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

using GradVars = std::vector<std::pair<std::string, Var<double>*>>;

/// Compares d loss / d v for every scalar of every listed variable.
/// `loss_fn` must rebuild the graph from the current values on each call.
inline GradCheckResult gradient_check(const GradVars& vars, const std::function<Var<double>()>& loss_fn,
                                      double step = 1e-5, double floor = 1e-5) {
  GradCheckResult res;
  for (auto& [name, v] : vars) v->zero_grad();
  backward(loss_fn());
  std::vector<Tensor<double>> analytic;
  for (auto& [name, v] : vars) analytic.push_back(v->grad());

  NoGradGuard no_grad;
  for (std::size_t k = 0; k < vars.size(); ++k) {
    auto& [name, v] = vars[k];
    Tensor<double>& x = v->mutable_value();
    for (Index i = 0; i < x.numel(); ++i) {
      const double orig = x[i];
      x[i] = orig + step;
      const double up = loss_fn().value()[0];
      x[i] = orig - step;
      const double down = loss_fn().value()[0];
      x[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double err = relative_error(analytic[k][i], numeric, floor);
      if (res.checked++ == 0 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = name + "[" + std::to_string(i) + "]";
        res.worst_analytic = analytic[k][i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

namespace detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(x * c) for a fixed tensor c, as a (1) scalar.
inline Var<double> weighted_sum(const Var<double>& x, const Tensor<double>& c) {
  auto flat = ops::reshape(x, {1, x.numel()});
  auto w = Var<double>::leaf(c.reshaped({1, c.numel()}));
  auto b = Var<double>::leaf(Tensor<double>({1}));
  return ops::reshape(ops::linear(flat, w, b), {1});
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names = {"linear", "backbone", "exemplar_sim", "dass", "counter", "model"};
  return names;
}

/// Runs the check for one module on `cfg` (expected to be small, e.g.
/// ModelConfig::tiny()). Inputs are drawn from `seed`; the main image is
/// image_size x image_size.
inline GradCheckResult gradcheck_module(const std::string& module, const ModelConfig& cfg, std::uint64_t seed = 0,
                                        Index image_size = 64) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x9c));
  GradCheckResult res;
  const Index c = cfg.channels, h = image_size / cfg.stride, w = image_size / cfg.stride;

  if (module == "linear") {
    LinearLayer<double> lin(6, 4, rng);
    for (auto& v : lin.bias.mutable_value().values()) v = rng.uniform(-1, 1);
    auto x = Var<double>::leaf(detail::random_tensor({3, 6}, rng), true);
    const auto coef = detail::random_tensor({3, 4}, rng);
    res = gradient_check({{"x", &x}, {"weight", &lin.weight}, {"bias", &lin.bias}},
                         [&] { return detail::weighted_sum(lin(x), coef); });
  } else if (module == "backbone") {
    BackboneParams<double> bb(cfg, seed);
    auto img = Var<double>::leaf(detail::random_tensor({1, 3, image_size, image_size}, rng, 0, 1), true);
    const auto main_c = detail::random_tensor({1, c, h, w}, rng);
    const Index g = cfg.exemplar_grid;
    const auto ex_c = detail::random_tensor({1, c, g, g}, rng);
    GradVars vars{{"image", &img}};
    bb.main.visit("backbone.main", [&](const std::string& n, Var<double>& v) { vars.emplace_back(n, &v); });
    bb.exemplar.visit("backbone.exemplar", [&](const std::string& n, Var<double>& v) { vars.emplace_back(n, &v); });
    res = gradient_check(vars, [&] {
      ImageTensor<double> im(img);
      auto f = extract_main_features(im, bb, cfg, Phase::train);
      auto e = extract_exemplar_features(im, bb, cfg, Phase::train);
      return ops::add(detail::weighted_sum(f.data, main_c), detail::weighted_sum(e.data, ex_c));
    });
  } else if (module == "exemplar_sim") {
    Rng proj_rng(derive_seed(seed, 4));
    TokenProjectionParams<double> proj(cfg.sub_patch * cfg.sub_patch * c, c, proj_rng);
    for (auto& v : proj.bias.mutable_value().values()) v = rng.uniform(-1, 1);
    const Index g = cfg.exemplar_grid;
    auto grid = Var<double>::leaf(detail::random_tensor({1, c, g, g}, rng), true);
    const auto coef = detail::random_tensor({1, cfg.token_count(), c}, rng);
    res = gradient_check({{"grid", &grid}, {"token_proj.weight", &proj.weight}, {"token_proj.bias", &proj.bias}},
                         [&] { return detail::weighted_sum(simulate_exemplar(ExemplarFeatureGrid<double>{grid}, proj, cfg).tokens, coef); });
  } else if (module == "dass") {
    DassParams<double> dass(cfg, seed);
    auto f = Var<double>::leaf(detail::random_tensor({1, c, h, w}, rng), true);
    auto tok = Var<double>::leaf(detail::random_tensor({1, cfg.token_count(), c}, rng), true);
    const auto coef = detail::random_tensor({1, h, w}, rng);
    GradVars vars{{"features", &f}, {"token", &tok}};
    dass.visit("dass", [&](const std::string& n, Var<double>& v) { vars.emplace_back(n, &v); });
    res = gradient_check(vars, [&] {
      FeatureMap<double> fm{f, cfg.stride};
      ExemplarToken<double> t{tok};
      auto aniso = anisotropic_encode(fm, dass);
      auto integrated = integrate_features(fm, aniso, direction_weights(t, dass), dass);
      auto recal = recalibrate_token(t, token_weights(gram_matrix(fm), dass));
      return detail::weighted_sum(similarity_map(integrated, recal).data, coef);
    });
  } else if (module == "counter") {
    Rng head_rng(derive_seed(seed, 5));
    RegressionHeadParams<double> head(c, cfg.head_widths, head_rng);
    for (auto& layer : head.layers) {
      for (auto& v : layer.bias.mutable_value().values()) v = rng.uniform(0.05, 0.5);
    }
    auto f = Var<double>::leaf(detail::random_tensor({1, c, h, w}, rng), true);
    auto s = Var<double>::leaf(detail::random_tensor({1, h, w}, rng), true);
    const Tensor<double> target({1}, 3.0);
    GradVars vars{{"features", &f}, {"similarity", &s}};
    head.visit("counter.head", [&](const std::string& n, Var<double>& v) { vars.emplace_back(n, &v); });
    res = gradient_check(vars, [&] {
      auto x = pool_correlation(FeatureMap<double>{f, cfg.stride}, SimilarityMap<double>{s});
      return loss_l2(regress_count(x, head), target);
    });
  } else if (module == "model") {
    GcnetParams<double> params(cfg, seed);
    auto img = Var<double>::leaf(detail::random_tensor({1, 3, image_size, image_size}, rng, 0, 1), true);
    const Tensor<double> target({1}, 5.0);
    GradVars vars{{"image", &img}};
    for (auto& p : params.named_parameters(cfg, ParamScope::active)) vars.push_back(p);
    res = gradient_check(vars, [&] {
      return loss_l2(forward(ImageTensor<double>(img), params, cfg, Phase::train).count, target);
    });
  } else {
    throw ConfigError("unknown gradcheck module '" + module + "'");
  }
  res.module = module;
  return res;
}

}  // namespace gcnet
