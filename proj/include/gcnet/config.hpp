#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gcnet/errors.hpp"
#include "gcnet/tensor.hpp"

namespace gcnet {

enum class Activation { relu, silu };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "silu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + s + "' (expected relu or silu)");
}

/// Architectural hyperparameters and ablation switches of the counting network.
struct ModelConfig {
  Index channels = 256;
  // One entry per stride-2 stage of each backbone branch; last entry == channels.
  std::vector<Index> stage_channels = {32, 64, 128, 256};
  Index stride = 16;
  Index exemplar_input_size = 512;
  Index exemplar_grid = 32;
  Index unfold_kernel = 8;
  Index unfold_stride = 1;
  Index sub_patch = 2;
  Index aniso_kernel_h = 3;  // horizontal kernel is 1 x aniso_kernel_h
  Index aniso_kernel_v = 3;  // vertical kernel is aniso_kernel_v x 1
  Index integration_kernel = 3;
  Index direction_hidden = 64;
  std::vector<Index> head_widths = {64, 32, 1};
  Activation backbone_activation = Activation::silu;
  bool batch_norm = true;

  // Ablation flags.
  bool recalibration = true;     // M: anisotropic encoder + token recalibration
  bool condenser = true;         // D: learned dual-attention weights
  bool location_counter = true;  // C: similarity-weighted pooling + regression head

  // Adds the box-exemplar stem and auxiliary count head.
  bool exemplar_variant = false;

  std::uint64_t seed = 0;

  Index token_count() const {
    const Index side = unfold_kernel / sub_patch;
    return side * side;
  }
  Index num_stages() const { return static_cast<Index>(stage_channels.size()); }

  /// Baseline path: pooled backbone features straight into the regression head.
  bool baseline_path() const { return !recalibration && !condenser && !location_counter; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("invalid model config: " + m); };
    if (channels < 1) fail("channels must be >= 1");
    if (stage_channels.empty()) fail("stage_channels must be non-empty");
    if (stage_channels.back() != channels) fail("last stage width must equal channels");
    if ((Index{1} << stage_channels.size()) != stride) {
      fail("stride " + std::to_string(stride) + " must equal 2^(number of stages)");
    }
    if (exemplar_input_size % stride != 0 || exemplar_input_size / stride != exemplar_grid) {
      fail("exemplar_input_size / stride must equal exemplar_grid");
    }
    if (unfold_kernel < 1 || unfold_kernel > exemplar_grid) fail("unfold_kernel must be in [1, G]");
    if (unfold_stride < 1) fail("unfold_stride must be >= 1");
    if (sub_patch < 1 || unfold_kernel % sub_patch != 0) {
      fail("unfold_kernel must be divisible by sub_patch");
    }
    if (unfold_kernel % 2 != 0) fail("unfold_kernel must be even");
    if (aniso_kernel_h % 2 == 0 || aniso_kernel_v % 2 == 0 || integration_kernel % 2 == 0) {
      fail("anisotropic and integration kernels must be odd");
    }
    if (direction_hidden < 1) fail("direction_hidden must be >= 1");
    if (head_widths.empty() || head_widths.back() != 1) fail("head_widths must end with 1");
  }

  /// Configuration used for desk-scale experiments and gradient checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.channels = 8;
    c.stage_channels = {8, 8, 8, 8};
    c.stride = 16;
    c.exemplar_input_size = 128;
    c.exemplar_grid = 8;
    c.unfold_kernel = 4;
    c.direction_hidden = 16;
    return c;
  }
};

}  // namespace gcnet
