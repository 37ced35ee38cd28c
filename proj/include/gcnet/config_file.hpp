#pragma once

// Run configuration files (YAML) with dotted command-line overrides.
//
//   model:  {preset: tiny, ablation: B3, channels: 8, ...}
//   train:  {preset: desk, learning_rate: 1e-3, augmentation: {...}, resize: {...}}
//   data:   {source: generated | directory | fsc147, root: ..., synthetic: {...}}
//
// Overrides look like "train.learning_rate=5e-4" and win over the file. Every
// error names the file, line and column of the offending node.

#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "json.hpp"

#include "gcnet/config.hpp"
#include "gcnet/data.hpp"
#include "gcnet/model.hpp"
#include "gcnet/serialization.hpp"
#include "gcnet/train_eval.hpp"

namespace gcnet {

enum class DataSource { generated, directory, fsc147 };

inline const char* to_string(DataSource s) {
  constexpr const char* names[] = {"generated", "directory", "fsc147"};
  return names[static_cast<int>(s)];
}

inline DataSource data_source_from_string(const std::string& s) {
  if (s == "generated") return DataSource::generated;
  if (s == "directory") return DataSource::directory;
  if (s == "fsc147") return DataSource::fsc147;
  throw ConfigError("unknown data source '" + s + "' (expected generated, directory or fsc147)");
}

struct DataConfig {
  DataSource source = DataSource::generated;
  std::string root;                 // directory/fsc147 sources; empty falls back to GCNET_DATA_ROOT
  std::int64_t train_count = 64;    // generated source only
  std::int64_t val_count = 32;      // generated source only; indices follow the train records
  Split val_split = Split::val;
  SyntheticSceneSpec synthetic;
};

struct RunConfig {
  ModelConfig model = ModelConfig::tiny();
  TrainConfig train = TrainConfig::desk();
  DataConfig data;
  std::optional<AblationRow> ablation;
};

namespace detail {

inline std::string mark_str(const std::string& source, const YAML::Mark& m) {
  if (m.is_null()) return source + ": (override)";
  return source + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

/// One mapping node being read; remembers which keys were consumed so that
/// leftovers can be reported as unknown.
class YamlSection {
 public:
  YamlSection(YAML::Node node, std::string path, std::string source)
      : node_(std::move(node)), path_(std::move(path)), source_(std::move(source)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) fail(node_, "section '" + path_ + "' must be a mapping");
  }

  bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const YAML::Node v = node_[key];
    try {
      if constexpr (std::is_same_v<T, bool>) {
        out = v.as<bool>();
      } else {
        out = v.as<T>();
      }
    } catch (const YAML::Exception&) {
      fail(v, "'" + qualified(key) + "' has the wrong type (expected " + type_name<T>() + ")");
    }
  }

  /// Reads a string and maps it through `parse`, which may throw ConfigError.
  template <typename T, typename Parse>
  void get_enum(const std::string& key, T& out, Parse&& parse) {
    std::string s;
    if (!has(key)) {
      seen_.insert(key);
      return;
    }
    get(key, s);
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      fail(node_[key], "'" + qualified(key) + "': " + e.what());
    }
  }

  YamlSection child(const std::string& key) {
    seen_.insert(key);
    return YamlSection(has(key) ? node_[key] : YAML::Node(), qualified(key), source_);
  }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) fail(kv.first, "unknown key '" + qualified(key) + "'");
    }
  }

  [[noreturn]] void fail(const YAML::Node& at, const std::string& msg) const {
    throw ConfigError(mark_str(source_, at.Mark()) + ": " + msg);
  }

  [[noreturn]] void fail_here(const std::string& msg) const {
    throw ConfigError(mark_str(source_, node_ ? node_.Mark() : YAML::Mark::null_mark()) + ": " + msg);
  }

  const std::string& source() const { return source_; }

 private:
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "true/false";
    else if constexpr (std::is_integral_v<T>) return "integer";
    else if constexpr (std::is_floating_point_v<T>) return "number";
    else if constexpr (std::is_same_v<T, std::string>) return "string";
    else return "list";
  }

  YAML::Node node_;
  std::string path_;
  std::string source_;
  std::set<std::string> seen_;
};

inline void apply_override(YAML::Node& root, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + spec + "': expected key.path=value");
  const std::string path = spec.substr(0, eq);
  YAML::Node value;
  try {
    value = YAML::Load(spec.substr(eq + 1));
  } catch (const YAML::Exception& e) {
    throw ConfigError("override '" + spec + "': " + e.msg);
  }
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) {
    if (k.empty()) throw ConfigError("override '" + spec + "': empty key segment");
    keys.push_back(k);
  }
  // yaml-cpp nodes are handles; walking with operator[] creates missing maps.
  std::vector<YAML::Node> chain{root};
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    YAML::Node next = chain.back()[keys[i]];
    if (next.IsDefined() && !next.IsNull() && !next.IsMap()) {
      throw ConfigError("override '" + spec + "': '" + keys[i] + "' is not a section");
    }
    chain.push_back(next);
  }
  chain.back()[keys.back()] = value;
}

inline void read_model(YamlSection s, RunConfig& rc) {
  std::string preset = "tiny";
  s.get("preset", preset);
  if (preset == "tiny") rc.model = ModelConfig::tiny();
  else if (preset == "default") rc.model = ModelConfig{};
  else s.fail_here("unknown model preset '" + preset + "' (expected tiny or default)");
  ModelConfig& m = rc.model;
  s.get("channels", m.channels);
  s.get("stage_channels", m.stage_channels);
  s.get("stride", m.stride);
  s.get("exemplar_input_size", m.exemplar_input_size);
  s.get("exemplar_grid", m.exemplar_grid);
  s.get("unfold_kernel", m.unfold_kernel);
  s.get("unfold_stride", m.unfold_stride);
  s.get("sub_patch", m.sub_patch);
  s.get("aniso_kernel_h", m.aniso_kernel_h);
  s.get("aniso_kernel_v", m.aniso_kernel_v);
  s.get("integration_kernel", m.integration_kernel);
  s.get("direction_hidden", m.direction_hidden);
  s.get("head_widths", m.head_widths);
  s.get_enum("backbone_activation", m.backbone_activation, activation_from_string);
  s.get("batch_norm", m.batch_norm);
  s.get("recalibration", m.recalibration);
  s.get("condenser", m.condenser);
  s.get("location_counter", m.location_counter);
  s.get("exemplar_variant", m.exemplar_variant);
  s.get("seed", m.seed);
  if (s.has("ablation")) {
    AblationRow row{};
    s.get_enum("ablation", row, ablation_row_from_string);
    rc.ablation = row;
  }
  s.finish();
}

inline void read_train(YamlSection s, RunConfig& rc) {
  std::string preset = "desk";
  s.get("preset", preset);
  if (preset == "desk") rc.train = TrainConfig::desk();
  else if (preset == "default") rc.train = TrainConfig{};
  else s.fail_here("unknown train preset '" + preset + "' (expected desk or default)");
  TrainConfig& t = rc.train;
  s.get("batch_size", t.batch_size);
  s.get("learning_rate", t.learning_rate);
  s.get("weight_decay", t.weight_decay);
  s.get("beta1", t.beta1);
  s.get("beta2", t.beta2);
  s.get("epsilon", t.epsilon);
  s.get("max_steps", t.max_steps);
  s.get("eval_interval", t.eval_interval);
  s.get("patience", t.patience);
  s.get_enum("loss", t.loss, loss_kind_from_string);
  s.get("exemplar_variant", t.exemplar_variant);
  s.get("eval_train", t.eval_train);
  s.get("init_count_bias", t.init_count_bias);
  s.get("seed", t.seed);

  auto a = s.child("augmentation");
  AugmentationConfig& ac = t.augmentation;
  a.get("random_scale", ac.random_scale);
  a.get("scale_min", ac.scale_min);
  a.get("scale_max", ac.scale_max);
  a.get("hflip_prob", ac.hflip_prob);
  a.get("vflip_prob", ac.vflip_prob);
  a.get("cutout_count", ac.cutout_count);
  a.get("cutout_fraction", ac.cutout_fraction);
  a.get("multiple", ac.multiple);
  a.get("seed", ac.seed);
  a.finish();

  auto r = s.child("resize");
  r.get("min_side", t.resize.min_side);
  r.get("max_side", t.resize.max_side);
  r.get("multiple", t.resize.multiple);
  r.get("exemplar_size", t.resize.exemplar_size);
  r.finish();
  s.finish();
}

inline void read_data(YamlSection s, RunConfig& rc) {
  DataConfig& d = rc.data;
  s.get_enum("source", d.source, data_source_from_string);
  s.get("root", d.root);
  s.get("train_count", d.train_count);
  s.get("val_count", d.val_count);
  s.get_enum("val_split", d.val_split, split_from_string);
  auto g = s.child("synthetic");
  SyntheticSceneSpec& sp = d.synthetic;
  g.get("height", sp.height);
  g.get("width", sp.width);
  if (g.has("families")) {
    std::vector<std::string> fam;
    g.get("families", fam);
    sp.families.clear();
    for (const auto& f : fam) {
      try {
        sp.families.push_back(shape_family_from_string(f));
      } catch (const ConfigError& e) {
        g.fail_here(e.what());
      }
    }
  }
  g.get("count_min", sp.count_min);
  g.get("count_max", sp.count_max);
  g.get("radius_min", sp.radius_min);
  g.get("radius_max", sp.radius_max);
  g.get("orientation_min", sp.orientation_min);
  g.get("orientation_max", sp.orientation_max);
  g.get("noise", sp.noise);
  g.get("distractors", sp.distractors);
  g.get("distractor_max", sp.distractor_max);
  g.get("iou_cap", sp.iou_cap);
  g.get("max_attempts", sp.max_attempts);
  g.get("seed", sp.seed);
  g.finish();
  s.finish();
}

}  // namespace detail

/// Parses YAML text. `source` names the text in diagnostics.
inline RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>",
                                  const std::vector<std::string>& overrides = {}) {
  YAML::Node root;
  try {
    root = text.empty() ? YAML::Node(YAML::NodeType::Map) : YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(detail::mark_str(source, e.mark) + ": " + e.msg);
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  if (!root.IsMap()) throw ConfigError(detail::mark_str(source, root.Mark()) + ": top level must be a mapping");
  for (const auto& o : overrides) detail::apply_override(root, o);

  RunConfig rc;
  detail::YamlSection top(root, "", source);
  detail::read_model(top.child("model"), rc);
  detail::read_train(top.child("train"), rc);
  detail::read_data(top.child("data"), rc);
  top.finish();

  if (rc.ablation) rc.model = ablation_variant(rc.model, *rc.ablation);
  // The auxiliary loss needs the box stem, so either switch turns on both.
  rc.train.exemplar_variant = rc.model.exemplar_variant = rc.train.exemplar_variant || rc.model.exemplar_variant;
  try {
    rc.model.validate();
    rc.train.validate();
    rc.data.synthetic.validate();
    if (rc.data.train_count < 1 || rc.data.val_count < 0) throw ConfigError("data.train_count must be >= 1 and val_count >= 0");
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str(), path.string(), overrides);
}

inline nlohmann::json to_json(const TrainConfig& t) {
  const auto& a = t.augmentation;
  return {{"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"max_steps", t.max_steps},
          {"eval_interval", t.eval_interval},
          {"patience", t.patience},
          {"loss", to_string(t.loss)},
          {"exemplar_variant", t.exemplar_variant},
          {"eval_train", t.eval_train},
          {"init_count_bias", t.init_count_bias},
          {"seed", t.seed},
          {"augmentation",
           {{"random_scale", a.random_scale}, {"scale_min", a.scale_min}, {"scale_max", a.scale_max},
            {"hflip_prob", a.hflip_prob}, {"vflip_prob", a.vflip_prob}, {"cutout_count", a.cutout_count},
            {"cutout_fraction", a.cutout_fraction}, {"multiple", a.multiple}, {"seed", a.seed}}},
          {"resize",
           {{"min_side", t.resize.min_side}, {"max_side", t.resize.max_side}, {"multiple", t.resize.multiple},
            {"exemplar_size", t.resize.exemplar_size}}}};
}

inline nlohmann::json to_json(const RunConfig& rc) {
  return {{"model", to_json(rc.model)},
          {"train", to_json(rc.train)},
          {"data",
           {{"source", to_string(rc.data.source)}, {"root", rc.data.root}, {"train_count", rc.data.train_count},
            {"val_count", rc.data.val_count}, {"val_split", to_string(rc.data.val_split)},
            {"synthetic", to_json(rc.data.synthetic)}}},
          {"ablation", rc.ablation ? nlohmann::json(to_string(*rc.ablation)) : nlohmann::json(nullptr)}};
}

/// Config tree that parse_run_config maps back to `rc`: presets are pinned
/// and the ablation row is already folded into the model flags.
inline nlohmann::json to_config_json(const RunConfig& rc) {
  auto j = to_json(rc);
  j["model"]["preset"] = "default";
  j["train"]["preset"] = "default";
  j.erase("ablation");
  return j;
}

/// Config file text for `rc`. JSON is a YAML subset, so the dump parses as is.
inline std::string to_yaml(const RunConfig& rc) { return to_config_json(rc).dump(2) + "\n"; }

}  // namespace gcnet
