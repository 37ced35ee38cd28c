#pragma once

// JSON mapping of configuration structs (checkpoint manifests, run manifests).

#include <string>

#include "json.hpp"

#include "gcnet/config.hpp"
#include "gcnet/data.hpp"

namespace gcnet {

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"channels", c.channels},
      {"stage_channels", c.stage_channels},
      {"stride", c.stride},
      {"exemplar_input_size", c.exemplar_input_size},
      {"exemplar_grid", c.exemplar_grid},
      {"unfold_kernel", c.unfold_kernel},
      {"unfold_stride", c.unfold_stride},
      {"sub_patch", c.sub_patch},
      {"aniso_kernel_h", c.aniso_kernel_h},
      {"aniso_kernel_v", c.aniso_kernel_v},
      {"integration_kernel", c.integration_kernel},
      {"direction_hidden", c.direction_hidden},
      {"head_widths", c.head_widths},
      {"backbone_activation", to_string(c.backbone_activation)},
      {"batch_norm", c.batch_norm},
      {"recalibration", c.recalibration},
      {"condenser", c.condenser},
      {"location_counter", c.location_counter},
      {"exemplar_variant", c.exemplar_variant},
      {"seed", c.seed},
  };
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.channels = j.at("channels").get<Index>();
    c.stage_channels = j.at("stage_channels").get<std::vector<Index>>();
    c.stride = j.at("stride").get<Index>();
    c.exemplar_input_size = j.at("exemplar_input_size").get<Index>();
    c.exemplar_grid = j.at("exemplar_grid").get<Index>();
    c.unfold_kernel = j.at("unfold_kernel").get<Index>();
    c.unfold_stride = j.at("unfold_stride").get<Index>();
    c.sub_patch = j.at("sub_patch").get<Index>();
    c.aniso_kernel_h = j.at("aniso_kernel_h").get<Index>();
    c.aniso_kernel_v = j.at("aniso_kernel_v").get<Index>();
    c.integration_kernel = j.at("integration_kernel").get<Index>();
    c.direction_hidden = j.at("direction_hidden").get<Index>();
    c.head_widths = j.at("head_widths").get<std::vector<Index>>();
    c.backbone_activation = activation_from_string(j.at("backbone_activation").get<std::string>());
    c.batch_norm = j.at("batch_norm").get<bool>();
    c.recalibration = j.at("recalibration").get<bool>();
    c.condenser = j.at("condenser").get<bool>();
    c.location_counter = j.at("location_counter").get<bool>();
    c.exemplar_variant = j.at("exemplar_variant").get<bool>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

inline nlohmann::json to_json(const SyntheticSceneSpec& s) {
  nlohmann::json fam = nlohmann::json::array();
  for (auto f : s.families) fam.push_back(to_string(f));
  return {
      {"height", s.height},
      {"width", s.width},
      {"families", fam},
      {"count_min", s.count_min},
      {"count_max", s.count_max},
      {"radius_min", s.radius_min},
      {"radius_max", s.radius_max},
      {"orientation_min", s.orientation_min},
      {"orientation_max", s.orientation_max},
      {"noise", s.noise},
      {"distractors", s.distractors},
      {"distractor_max", s.distractor_max},
      {"iou_cap", s.iou_cap},
      {"max_attempts", s.max_attempts},
      {"seed", s.seed},
  };
}

inline SyntheticSceneSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSceneSpec s;
  try {
    s.height = j.at("height").get<Index>();
    s.width = j.at("width").get<Index>();
    s.families.clear();
    for (const auto& f : j.at("families")) s.families.push_back(shape_family_from_string(f.get<std::string>()));
    s.count_min = j.at("count_min").get<std::int64_t>();
    s.count_max = j.at("count_max").get<std::int64_t>();
    s.radius_min = j.at("radius_min").get<double>();
    s.radius_max = j.at("radius_max").get<double>();
    s.orientation_min = j.at("orientation_min").get<double>();
    s.orientation_max = j.at("orientation_max").get<double>();
    s.noise = j.at("noise").get<double>();
    s.distractors = j.at("distractors").get<bool>();
    s.distractor_max = j.at("distractor_max").get<std::int64_t>();
    s.iou_cap = j.at("iou_cap").get<double>();
    s.max_attempts = j.at("max_attempts").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  return s;
}

}  // namespace gcnet
