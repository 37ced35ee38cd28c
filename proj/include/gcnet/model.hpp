#pragma once

// Full counting network: pseudo-Siamese frontend -> exemplar simulator ->
// dual-attention self-similarity -> location-aware counter, with switches for
// the ablation rows B0..B4.

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gcnet/backbone.hpp"
#include "gcnet/counter.hpp"
#include "gcnet/dass.hpp"
#include "gcnet/exemplar_sim.hpp"

namespace gcnet {

enum class ParamScope {
  all,     // everything instantiated for the config (what a checkpoint stores)
  active,  // only parameters the configured forward path touches
};

template <typename T>
struct GcnetParams {
  BackboneParams<T> backbone;
  BackboneBranch<T> box_stem;  // exemplar_variant only
  TokenProjectionParams<T> token_proj;
  DassParams<T> dass;
  RegressionHeadParams<T> head;
  GapCounterParams<T> gap;
  bool has_box_stem = false;

  GcnetParams() = default;
  explicit GcnetParams(const ModelConfig& cfg) : GcnetParams(cfg, cfg.seed) {}
  GcnetParams(const ModelConfig& cfg, std::uint64_t seed)
      : backbone(cfg, seed), dass(cfg, seed), has_box_stem(cfg.exemplar_variant) {
    cfg.validate();
    Rng proj_rng(derive_seed(seed, 4));
    token_proj = TokenProjectionParams<T>(cfg.sub_patch * cfg.sub_patch * cfg.channels, cfg.channels,
                                          proj_rng);
    Rng head_rng(derive_seed(seed, 5));
    head = RegressionHeadParams<T>(cfg.channels, cfg.head_widths, head_rng);
    if (has_box_stem) {
      Rng box_rng(derive_seed(seed, 6));
      box_stem = BackboneBranch<T>(cfg, box_rng);
    }
  }

  /// Walks parameters in canonical order. With ParamScope::active the walk is
  /// restricted to what `cfg`'s flags use.
  template <typename F>
  void visit(const ModelConfig& cfg, F&& fn, ParamScope scope = ParamScope::all) {
    const bool all = scope == ParamScope::all;
    const bool baseline = cfg.baseline_path();
    backbone.main.visit("backbone.main", fn);
    if (all || !baseline) backbone.exemplar.visit("backbone.exemplar", fn);
    if (has_box_stem && (all || !baseline)) box_stem.visit("backbone.box", fn);
    if (all || !baseline) token_proj.visit("exemplar_sim.token_proj", fn);
    if (all || (!baseline && cfg.recalibration)) dass.visit_anisotropic("dass", fn);
    if (all || !baseline) dass.visit_integration("dass", fn);
    if (all || (!baseline && cfg.recalibration && cfg.condenser)) {
      dass.direction_hidden.visit("dass.direction_hidden", fn);
      dass.direction_out.visit("dass.direction_out", fn);
    }
    if (all || (!baseline && cfg.condenser)) dass.token_head.visit("dass.token_head", fn);
    if (all || baseline || cfg.location_counter) head.visit("counter.head", fn);
    if (all || (!baseline && !cfg.location_counter)) gap.visit("counter.gap", fn);
  }

  template <typename F>
  void visit_buffers(F&& fn) {
    backbone.main.visit_buffers("backbone.main", fn);
    backbone.exemplar.visit_buffers("backbone.exemplar", fn);
    if (has_box_stem) box_stem.visit_buffers("backbone.box", fn);
  }

  std::vector<std::pair<std::string, Var<T>*>> named_parameters(const ModelConfig& cfg,
                                                                ParamScope scope = ParamScope::all) {
    std::vector<std::pair<std::string, Var<T>*>> out;
    visit(cfg, [&](const std::string& name, Var<T>& v) { out.emplace_back(name, &v); }, scope);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    visit_buffers([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
    return out;
  }
};

/// Number of scalar parameters on the configured forward path.
template <typename T>
Index parameter_count(GcnetParams<T>& params, const ModelConfig& cfg) {
  Index n = 0;
  params.visit(cfg, [&](const std::string&, Var<T>& v) { n += v.numel(); }, ParamScope::active);
  return n;
}

/// Deep copy with (possibly) different scalar type. Var handles in `src` are
/// never shared with the result.
template <typename U, typename T>
GcnetParams<U> convert_params(GcnetParams<T>& src, const ModelConfig& cfg) {
  GcnetParams<U> dst(cfg);
  auto sp = src.named_parameters(cfg);
  auto dp = dst.named_parameters(cfg);
  for (std::size_t i = 0; i < sp.size(); ++i) dp[i].second->mutable_value() = sp[i].second->value().template cast<U>();
  auto sb = src.named_buffers();
  auto db = dst.named_buffers();
  for (std::size_t i = 0; i < sb.size(); ++i) *db[i].second = sb[i].second->template cast<U>();
  return dst;
}

template <typename T>
GcnetParams<T> clone_params(GcnetParams<T>& src, const ModelConfig& cfg) {
  return convert_params<T>(src, cfg);
}

/// Intermediates exposed for tests and visualisation. Optional members are
/// absent on paths that do not compute them (e.g. the B0 baseline).
template <typename T>
struct ForwardResult {
  CountPrediction<T> count;
  FeatureMap<T> crude;                         // F_r
  std::optional<ExemplarToken<T>> token;       // T_e
  std::optional<FeatureMap<T>> integrated;     // F-bar_r
  std::optional<ExemplarToken<T>> recalibrated;  // T-bar_e
  std::optional<DirectionWeights<T>> direction;
  std::optional<TokenWeights<T>> token_weights;
  std::optional<SimilarityMap<T>> similarity;  // S
};

/// Simulator + DASS + counter on given main features and exemplar grid.
template <typename T>
void forward_backend(ForwardResult<T>& r, const ExemplarFeatureGrid<T>& grid, GcnetParams<T>& params,
                     const ModelConfig& cfg) {
  const FeatureMap<T>& f = r.crude;
  const Index batch = f.batch();
  r.token = simulate_exemplar(grid, params.token_proj, cfg);

  if (cfg.recalibration) {
    auto aniso = anisotropic_encode(f, params.dass);
    r.direction = cfg.condenser ? direction_weights(*r.token, params.dass)
                                : uniform_direction_weights<T>(batch);
    r.integrated = integrate_features(f, aniso, *r.direction, params.dass);
  } else {
    r.integrated = integrate_plain(f, params.dass);
  }

  r.token_weights = cfg.condenser ? token_weights(gram_matrix(f), params.dass)
                                  : uniform_token_weights<T>(batch, r.token->count());
  r.recalibrated = recalibrate_token(*r.token, *r.token_weights);
  r.similarity = similarity_map(*r.integrated, *r.recalibrated);

  r.count = cfg.location_counter ? regress_count(pool_correlation(*r.integrated, *r.similarity), params.head)
                                 : gap_count(*r.similarity, params.gap);
}

template <typename T>
ForwardResult<T> forward(const ImageTensor<T>& image, GcnetParams<T>& params, const ModelConfig& cfg,
                         Phase phase) {
  ForwardResult<T> r;
  r.crude = extract_main_features(image, params.backbone, cfg, phase);
  if (cfg.baseline_path()) {
    r.count = regress_count(CountEmbedding<T>{ops::mean_spatial(r.crude.data)}, params.head);
    return r;
  }
  forward_backend(r, extract_exemplar_features(image, params.backbone, cfg, phase), params, cfg);
  return r;
}

/// Auxiliary count from labelled exemplar crops (B, 3, E, E) pushed through the
/// box stem and the shared back-end, reusing main features from `main`.
template <typename T>
CountPrediction<T> forward_exemplar_aux(const ImageTensor<T>& crops, const ForwardResult<T>& main,
                                        GcnetParams<T>& params, const ModelConfig& cfg, Phase phase) {
  if (!params.has_box_stem) throw ConfigError("exemplar auxiliary head requires exemplar_variant");
  if (cfg.baseline_path()) throw ConfigError("exemplar auxiliary head is undefined for the B0 baseline");
  if (crops.batch() != main.crude.batch()) {
    throw ShapeError("exemplar crops batch does not match image batch");
  }
  ForwardResult<T> aux;
  aux.crude = main.crude;
  forward_backend(aux, extract_exemplar_features(crops, params.box_stem, cfg, phase), params, cfg);
  return aux.count;
}

enum class AblationRow { B0, B1, B2, B3, B4 };

inline const char* to_string(AblationRow row) {
  constexpr const char* names[] = {"B0", "B1", "B2", "B3", "B4"};
  return names[static_cast<int>(row)];
}

inline AblationRow ablation_row_from_string(const std::string& s) {
  for (auto row : {AblationRow::B0, AblationRow::B1, AblationRow::B2, AblationRow::B3, AblationRow::B4}) {
    if (s == to_string(row)) return row;
  }
  throw ConfigError("unknown ablation row '" + s + "' (expected B0..B4)");
}

/// Flags (M, D, C) per row: B0 (off, off, off), B1 (on, on, off),
/// B2 (off, off, on), B3 (on, off, on), B4 (on, on, on).
inline ModelConfig ablation_variant(ModelConfig cfg, AblationRow row) {
  struct Flags {
    bool m, d, c;
  };
  constexpr Flags table[] = {
      {false, false, false}, {true, true, false}, {false, false, true}, {true, false, true}, {true, true, true}};
  const Flags f = table[static_cast<int>(row)];
  cfg.recalibration = f.m;
  cfg.condenser = f.d;
  cfg.location_counter = f.c;
  return cfg;
}

inline ModelConfig ablation_variant(ModelConfig cfg, const std::string& row) {
  return ablation_variant(std::move(cfg), ablation_row_from_string(row));
}

}  // namespace gcnet
