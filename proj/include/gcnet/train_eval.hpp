#pragma once

// Losses, AdamW, the training loop, count metrics and the ablation runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gcnet/checkpoint.hpp"
#include "gcnet/data.hpp"
#include "gcnet/image_io.hpp"
#include "gcnet/model.hpp"

namespace gcnet {

// ---------------------------------------------------------------- losses

template <typename T>
Var<T> loss_l2(const CountPrediction<T>& pred, const Tensor<T>& target) {
  return ops::squared_error(pred.data, target);
}

template <typename T>
Var<T> loss_l1(const CountPrediction<T>& pred, const Tensor<T>& target) {
  return ops::absolute_error(pred.data, target);
}

/// Equal-weight blend of the auxiliary exemplar-count loss and the main loss.
template <typename T>
Var<T> loss_exemplar_variant(const CountPrediction<T>& main, const std::optional<CountPrediction<T>>& aux,
                             const Tensor<T>& target) {
  if (!aux || !aux->data.defined()) throw ConfigError("exemplar-variant loss needs the auxiliary prediction");
  return ops::add(ops::scale(loss_l2(*aux, target), T(0.5)), ops::scale(loss_l2(main, target), T(0.5)));
}

// ---------------------------------------------------------------- configuration

enum class LossKind { l2, l1 };

inline const char* to_string(LossKind k) { return k == LossKind::l2 ? "l2" : "l1"; }

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "l2" || s == "L2") return LossKind::l2;
  if (s == "l1" || s == "L1") return LossKind::l1;
  throw ConfigError("unknown loss kind '" + s + "' (expected l1 or l2)");
}

struct TrainConfig {
  Index batch_size = 10;
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t max_steps = 1000;
  std::int64_t eval_interval = 100;  // 0: evaluate only after the last step
  std::int64_t patience = 0;         // evaluations without improvement before stopping; 0 disables
  LossKind loss = LossKind::l2;
  bool exemplar_variant = false;
  bool eval_train = false;           // also report the train split at each evaluation
  bool init_count_bias = true;       // start the output bias at the mean training count
  AugmentationConfig augmentation = AugmentationConfig::none();
  ResizeBand resize;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint_path;  // best-validation checkpoint; empty disables
  nlohmann::json checkpoint_metadata = nlohmann::json::object();

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    // Zero is accepted so that frozen runs are expressible; negative is not.
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("Adam betas must be in [0, 1)");
    if (epsilon <= 0) throw ConfigError("epsilon must be > 0");
    if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
    if (eval_interval < 0 || patience < 0) throw ConfigError("eval_interval and patience must be >= 0");
    augmentation.validate();
  }

  /// Settings for the small synthetic runs that fit on one CPU core.
  static TrainConfig desk() {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.max_steps = 2000;
    c.eval_interval = 250;
    c.resize = ResizeBand{128, 128, 16, 128};
    c.augmentation.hflip_prob = 0.5;
    c.augmentation.vflip_prob = 0.5;
    return c;
  }
};

// ---------------------------------------------------------------- optimizer

/// Adam with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Var<float>*>> params, const TrainConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, v] : params_) {
      state_.first_moment.emplace(name, Tensor<float>(v->shape()));
      state_.second_moment.emplace(name, Tensor<float>(v->shape()));
    }
  }

  void zero_grad() {
    for (auto& [name, v] : params_) v->zero_grad();
  }

  void step() {
    ++state_.step;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(state_.step));
    const auto b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
    const auto lr = static_cast<float>(cfg_.learning_rate), wd = static_cast<float>(cfg_.weight_decay);
    const auto eps = static_cast<float>(cfg_.epsilon);
    for (auto& [name, v] : params_) {
      const Tensor<float>& g = v->grad();
      Tensor<float>& p = v->mutable_value();
      Tensor<float>& m = state_.first_moment.at(name);
      Tensor<float>& s = state_.second_moment.at(name);
      for (Index i = 0; i < p.numel(); ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        s[i] = b2 * s[i] + (1 - b2) * g[i] * g[i];
        const float m_hat = static_cast<float>(m[i] / bc1);
        const float v_hat = static_cast<float>(s[i] / bc2);
        p[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + wd * p[i]);
      }
    }
  }

  const OptimizerState& state() const { return state_; }

  void load_state(const OptimizerState& st) {
    for (auto& [name, v] : params_) {
      auto m = st.first_moment.find(name), s = st.second_moment.find(name);
      if (m == st.first_moment.end() || s == st.second_moment.end() || m->second.shape() != v->shape() ||
          s->second.shape() != v->shape()) {
        throw CheckpointShapeError("optimizer state does not match parameter '" + name + "'");
      }
    }
    state_ = st;
  }

 private:
  std::vector<std::pair<std::string, Var<float>*>> params_;
  TrainConfig cfg_;
  OptimizerState state_;
};

// ---------------------------------------------------------------- metrics

struct EvalReport {
  double mae = 0;
  double mse = 0;  // root-mean-square error
  std::vector<double> predictions;  // clamped at 0
  std::vector<double> abs_errors;
  Split split = Split::val;
  std::int64_t step = 0;
};

/// MAE and RMSE after clamping predictions at zero.
inline EvalReport compute_metrics(const std::vector<double>& predictions, const std::vector<double>& targets,
                                  Split split = Split::val, std::int64_t step = 0) {
  if (predictions.empty()) throw DataError("cannot evaluate an empty split");
  if (predictions.size() != targets.size()) {
    throw ShapeError("metrics: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(targets.size()) + " targets");
  }
  EvalReport r;
  r.split = split;
  r.step = step;
  double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = std::max(0.0, predictions[i]);
    const double e = std::abs(p - targets[i]);
    r.predictions.push_back(p);
    r.abs_errors.push_back(e);
    abs_sum += e;
    sq_sum += e * e;
  }
  const auto n = static_cast<double>(predictions.size());
  r.mae = abs_sum / n;
  r.mse = std::sqrt(sq_sum / n);
  return r;
}

/// Raw (unclamped) counts for each record; equally sized neighbours share a batch.
inline std::vector<double> predict_counts(GcnetParams<float>& params, const ModelConfig& cfg,
                                          const std::vector<DatasetRecord>& records, const ResizeBand& band = {},
                                          Index max_batch = 16) {
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(records.size());
  std::vector<Image> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    auto r = forward(ImageTensor<float>::from(stack_images(pending)), params, cfg, Phase::eval);
    for (float v : r.count.data.value().values()) out.push_back(v);
    pending.clear();
  };
  for (const auto& rec : records) {
    Image img = resize_policy(record_image(rec), ResizeMode::train_main, band);
    if (!pending.empty() && (pending.front().shape() != img.shape() || static_cast<Index>(pending.size()) >= max_batch)) {
      flush();
    }
    pending.push_back(std::move(img));
  }
  flush();
  return out;
}

inline EvalReport evaluate(GcnetParams<float>& params, const ModelConfig& cfg, const std::vector<DatasetRecord>& records,
                           Split split = Split::val, std::int64_t step = 0, const ResizeBand& band = {}) {
  if (records.empty()) throw DataError(std::string("cannot evaluate an empty ") + to_string(split) + " split");
  std::vector<double> targets;
  for (const auto& r : records) targets.push_back(static_cast<double>(r.count));
  return compute_metrics(predict_counts(params, cfg, records, band), targets, split, step);
}

// ---------------------------------------------------------------- training

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per step
  std::vector<EvalReport> history;
  std::int64_t steps_run = 0;
  bool stopped_early = false;
  double best_val_mae = std::numeric_limits<double>::infinity();
  std::int64_t best_step = -1;
  std::optional<Checkpoint> best;  // parameters at the best validation MAE
  OptimizerState optimizer;
};

namespace detail {

/// Crop of the first exemplar box, resized to the exemplar input size.
inline Image exemplar_crop(const Image& img, const DatasetRecord& rec, Index size) {
  if (rec.exemplar_boxes.empty()) throw DataError("record '" + rec.id + "' has no exemplar box");
  const Box& b = rec.exemplar_boxes.front();
  const Index h = img.dim(1), w = img.dim(2);
  const Index x1 = std::clamp<Index>(static_cast<Index>(std::floor(b.x1)), 0, w - 1);
  const Index y1 = std::clamp<Index>(static_cast<Index>(std::floor(b.y1)), 0, h - 1);
  const Index x2 = std::clamp<Index>(static_cast<Index>(std::ceil(b.x2)), x1 + 1, w);
  const Index y2 = std::clamp<Index>(static_cast<Index>(std::ceil(b.y2)), y1 + 1, h);
  Image crop({3, y2 - y1, x2 - x1});
  for (Index c = 0; c < 3; ++c)
    for (Index y = y1; y < y2; ++y)
      for (Index x = x1; x < x2; ++x) crop.at(c, y - y1, x - x1) = img.at(c, y, x);
  return resize_image(crop, {size, size});
}

struct PreparedSample {
  Image image;
  Image crop;  // empty unless the exemplar variant is trained
  float count = 0;
  std::string id;
};

inline void set_output_bias(GcnetParams<float>& params, const ModelConfig& cfg, float value) {
  auto& last = params.head.layers.back().bias.mutable_value();
  last.fill(value);
  if (!cfg.baseline_path() && !cfg.location_counter) params.gap.offset.mutable_value().fill(value);
}

}  // namespace detail

/// Mini-batch training of `params` in place. Batches are drawn from a seeded
/// permutation per epoch; images of different sizes inside one batch are run
/// as separate groups whose losses are weighted by group size.
/// Called after every evaluation with the report just produced.
using TrainObserver = std::function<void(const EvalReport&)>;

inline TrainResult train(GcnetParams<float>& params, const ModelConfig& cfg, const std::vector<DatasetRecord>& train_set,
                         const std::vector<DatasetRecord>& val_set, const TrainConfig& tc,
                         const TrainObserver& observer = {}) {
  tc.validate();
  if (train_set.empty()) throw DataError("training split is empty");
  if (tc.exemplar_variant && !params.has_box_stem) {
    throw ConfigError("exemplar_variant training needs a model built with exemplar_variant");
  }
  TrainResult result;
  auto named = params.named_parameters(cfg, ParamScope::active);
  AdamW opt(named, tc);

  if (tc.init_count_bias && tc.max_steps > 0) {
    double mean = 0;
    for (const auto& r : train_set) mean += static_cast<double>(r.count);
    detail::set_output_bias(params, cfg, static_cast<float>(mean / static_cast<double>(train_set.size())));
  }

  std::vector<Image> base_images;
  base_images.reserve(train_set.size());
  for (const auto& r : train_set) base_images.push_back(resize_policy(record_image(r), ResizeMode::train_main, tc.resize));

  const auto n = static_cast<Index>(train_set.size());
  std::vector<Index> order;
  std::int64_t epoch = -1;
  Index cursor = n;
  std::int64_t evals_since_best = 0;

  auto snapshot = [&](std::int64_t step) {
    auto ck = make_checkpoint(params, cfg, step);
    ck.metadata = tc.checkpoint_metadata;
    return ck;
  };
  auto run_eval = [&](std::int64_t step) {
    if (tc.eval_train) {
      result.history.push_back(evaluate(params, cfg, train_set, Split::train, step, tc.resize));
      if (observer) observer(result.history.back());
    }
    if (val_set.empty()) return;
    EvalReport rep = evaluate(params, cfg, val_set, Split::val, step, tc.resize);
    if (rep.mae < result.best_val_mae) {
      result.best_val_mae = rep.mae;
      result.best_step = step;
      result.best = snapshot(step);
      if (!tc.checkpoint_path.empty()) save_checkpoint(tc.checkpoint_path, *result.best);
      evals_since_best = 0;
    } else {
      ++evals_since_best;
    }
    result.history.push_back(std::move(rep));
    if (observer) observer(result.history.back());
  };

  for (std::int64_t step = 1; step <= tc.max_steps; ++step) {
    std::vector<Index> batch;
    while (static_cast<Index>(batch.size()) < std::min(tc.batch_size, n)) {
      if (cursor >= n) {
        ++epoch;
        order.resize(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng perm(derive_seed(tc.seed, 0x1000 + static_cast<std::uint64_t>(epoch)));
        perm.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(order[static_cast<std::size_t>(cursor++)]);
    }

    std::map<std::pair<Index, Index>, std::vector<detail::PreparedSample>> groups;
    for (Index idx : batch) {
      const auto& rec = train_set[static_cast<std::size_t>(idx)];
      const std::uint64_t sample_seed = static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(n) +
                                        static_cast<std::uint64_t>(idx);
      auto aug = augment(base_images[static_cast<std::size_t>(idx)], rec.count, tc.augmentation,
                         derive_seed(tc.seed, sample_seed));
      detail::PreparedSample s;
      if (tc.exemplar_variant) s.crop = detail::exemplar_crop(base_images[static_cast<std::size_t>(idx)], rec, cfg.exemplar_input_size);
      s.count = static_cast<float>(aug.count);
      s.id = rec.id;
      const auto key = std::make_pair(aug.image.dim(1), aug.image.dim(2));
      s.image = std::move(aug.image);
      groups[key].push_back(std::move(s));
    }

    opt.zero_grad();
    double step_loss = 0;
    for (auto& [key, samples] : groups) {
      std::vector<Image> imgs, crops;
      Tensor<float> target({static_cast<Index>(samples.size())});
      for (std::size_t i = 0; i < samples.size(); ++i) {
        imgs.push_back(samples[i].image);
        if (tc.exemplar_variant) crops.push_back(samples[i].crop);
        target[static_cast<Index>(i)] = samples[i].count;
      }
      auto r = forward(ImageTensor<float>::from(stack_images(imgs)), params, cfg, Phase::train);
      Var<float> loss;
      if (tc.exemplar_variant) {
        auto aux = forward_exemplar_aux(ImageTensor<float>::from(stack_images(crops)), r, params, cfg, Phase::train);
        loss = loss_exemplar_variant(r.count, std::optional<CountPrediction<float>>(aux), target);
      } else {
        loss = tc.loss == LossKind::l2 ? loss_l2(r.count, target) : loss_l1(r.count, target);
      }
      const float weight = static_cast<float>(samples.size()) / static_cast<float>(batch.size());
      const double value = loss.value()[0];
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (batch records:";
        for (Index idx : batch) msg << ' ' << train_set[static_cast<std::size_t>(idx)].id;
        msg << ')';
        throw TrainingError(msg.str());
      }
      step_loss += weight * value;
      backward(ops::scale(loss, weight));
    }
    opt.step();
    result.loss_curve.push_back(step_loss);
    result.steps_run = step;

    const bool last = step == tc.max_steps;
    if ((tc.eval_interval > 0 && step % tc.eval_interval == 0) || last) {
      run_eval(step);
      if (tc.patience > 0 && evals_since_best >= tc.patience) {
        result.stopped_early = true;
        break;
      }
    }
  }

  // Without a validation split the final parameters are the best ones.
  if (val_set.empty()) {
    result.best = snapshot(result.steps_run);
    result.best_step = result.steps_run;
    if (!tc.checkpoint_path.empty()) save_checkpoint(tc.checkpoint_path, *result.best);
  }
  result.optimizer = opt.state();
  return result;
}

// ---------------------------------------------------------------- CSV outputs

/// Shared number format for printed and written metrics.
inline std::string format_metric(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write metrics CSV: " + path.string());
  os << "step,split,mae,mse\n";
  for (const auto& r : reports) {
    os << r.step << ',' << to_string(r.split) << ',' << format_metric(r.mae) << ',' << format_metric(r.mse) << '\n';
  }
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& curve) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write loss CSV: " + path.string());
  os << "step,loss\n" << std::setprecision(17);
  for (std::size_t i = 0; i < curve.size(); ++i) os << i + 1 << ',' << curve[i] << '\n';
}

// ---------------------------------------------------------------- ablation

struct AblationResult {
  AblationRow row = AblationRow::B0;
  bool recalibration = false;
  bool condenser = false;
  bool location_counter = false;
  Index parameters = 0;
  std::optional<EvalReport> train;
  std::optional<EvalReport> val;
  std::string error;  // empty when the row completed

  bool ok() const { return error.empty(); }
};

/// Trains every requested row from the same seed and budget. A failing row is
/// recorded and the remaining rows still run.
inline std::vector<AblationResult> run_ablation(const std::vector<DatasetRecord>& train_set,
                                                const std::vector<DatasetRecord>& val_set,
                                                const std::vector<AblationRow>& rows, const ModelConfig& base,
                                                const TrainConfig& tc) {
  if (rows.empty()) throw ConfigError("ablation needs at least one row");
  std::vector<AblationResult> out;
  for (auto row : rows) {
    const ModelConfig cfg = ablation_variant(base, row);
    AblationResult res;
    res.row = row;
    res.recalibration = cfg.recalibration;
    res.condenser = cfg.condenser;
    res.location_counter = cfg.location_counter;
    try {
      GcnetParams<float> params(cfg);
      res.parameters = parameter_count(params, cfg);
      TrainConfig row_tc = tc;
      row_tc.checkpoint_path.clear();
      train(params, cfg, train_set, val_set, row_tc);
      res.train = evaluate(params, cfg, train_set, Split::train, tc.max_steps, tc.resize);
      if (!val_set.empty()) res.val = evaluate(params, cfg, val_set, Split::val, tc.max_steps, tc.resize);
    } catch (const std::exception& e) {
      res.error = e.what();
    }
    out.push_back(std::move(res));
  }
  return out;
}

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationResult>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write ablation CSV: " + path.string());
  auto flag = [](bool b) { return b ? "1" : "0"; };
  auto num = [](const std::optional<EvalReport>& r, bool mae) {
    return r ? format_metric(mae ? r->mae : r->mse) : std::string();
  };
  os << "row,M,D,C,parameters,train_mae,train_mse,val_mae,val_mse,status\n";
  for (const auto& r : rows) {
    os << to_string(r.row) << ',' << flag(r.recalibration) << ',' << flag(r.condenser) << ','
       << flag(r.location_counter) << ',' << r.parameters << ',' << num(r.train, true) << ','
       << num(r.train, false) << ',' << num(r.val, true) << ',' << num(r.val, false) << ','
       << (r.ok() ? "ok" : "\"error: " + r.error + "\"") << '\n';
  }
}

}  // namespace gcnet
