#pragma once

// Pseudo-Siamese frontend: two backbone branches with independent weights.
// The main branch keeps the input resolution (stride 16 features); the
// exemplar branch sees the image resized to a fixed square first.

#include <string>
#include <vector>

#include "gcnet/config.hpp"
#include "gcnet/layers.hpp"

namespace gcnet {

enum class Phase { train, eval };

/// Batched RGB images (B, 3, H, W) with values in [0, 1].
template <typename T>
struct ImageTensor {
  Var<T> data;

  ImageTensor() = default;
  explicit ImageTensor(Var<T> d) : data(std::move(d)) {
    const auto& s = data.shape();
    if (s.size() != 4 || s[0] < 1 || s[1] != 3 || s[2] < 1 || s[3] < 1) {
      throw ShapeError("image tensor must be (B>=1, 3, H, W), got " + shape_str(s));
    }
  }
  static ImageTensor from(Tensor<T> t, bool requires_grad = false) {
    return ImageTensor(Var<T>::leaf(std::move(t), requires_grad));
  }

  Index batch() const { return data.dim(0); }
  Index height() const { return data.dim(2); }
  Index width() const { return data.dim(3); }
};

/// (B, C, h, w) features at a known stride relative to the source image.
template <typename T>
struct FeatureMap {
  Var<T> data;
  Index stride = 1;

  Index batch() const { return data.dim(0); }
  Index channels() const { return data.dim(1); }
  Index height() const { return data.dim(2); }
  Index width() const { return data.dim(3); }
};

/// Square (B, C, G, G) feature grid produced by the exemplar branch.
template <typename T>
struct ExemplarFeatureGrid {
  Var<T> data;

  Index side() const { return data.dim(2); }
  Index channels() const { return data.dim(1); }
};

/// One stack of stride-2 conv -> norm -> activation stages.
template <typename T>
struct BackboneBranch {
  std::vector<Conv2dLayer<T>> convs;
  std::vector<BatchNormLayer<T>> norms;
  bool use_norm = true;
  Activation activation = Activation::silu;

  BackboneBranch() = default;
  BackboneBranch(const ModelConfig& cfg, Rng& rng)
      : use_norm(cfg.batch_norm), activation(cfg.backbone_activation) {
    Index in = 3;
    for (Index out : cfg.stage_channels) {
      // Normalisation cancels a conv bias, so the conv drops it.
      convs.emplace_back(in, out, 3, 3, rng, !use_norm);
      if (use_norm) norms.emplace_back(out);
      in = out;
    }
  }

  Var<T> operator()(Var<T> x, Phase phase) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      x = convs[i](x, ops::ConvGeometry{2, 2, 1, 1});
      if (use_norm) x = norms[i](x, phase == Phase::train);
      x = activation == Activation::relu ? ops::relu(x) : ops::silu(x);
    }
    return x;
  }

  template <typename F>
  void visit(const std::string& prefix, F&& fn) {
    for (std::size_t i = 0; i < convs.size(); ++i) {
      const std::string stage = prefix + ".stage" + std::to_string(i);
      convs[i].visit(stage + ".conv", fn);
      if (use_norm) norms[i].visit(stage + ".norm", fn);
    }
  }

  template <typename F>
  void visit_buffers(const std::string& prefix, F&& fn) {
    if (!use_norm) return;
    for (std::size_t i = 0; i < norms.size(); ++i) {
      norms[i].visit_buffers(prefix + ".stage" + std::to_string(i) + ".norm", fn);
    }
  }
};

/// The two branches never share storage; each is initialised from its own seed stream.
template <typename T>
struct BackboneParams {
  BackboneBranch<T> main;
  BackboneBranch<T> exemplar;

  BackboneParams() = default;
  BackboneParams(const ModelConfig& cfg, std::uint64_t seed) {
    Rng main_rng(derive_seed(seed, 1));
    Rng exemplar_rng(derive_seed(seed, 2));
    main = BackboneBranch<T>(cfg, main_rng);
    exemplar = BackboneBranch<T>(cfg, exemplar_rng);
  }
};

/// Main-branch features at the configured stride; H and W must be multiples of it.
template <typename T>
FeatureMap<T> extract_main_features(const ImageTensor<T>& image, BackboneBranch<T>& branch,
                                    const ModelConfig& cfg, Phase phase) {
  if (image.height() % cfg.stride != 0 || image.width() % cfg.stride != 0) {
    throw ShapeError("image size " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + " is not divisible by stride " +
                     std::to_string(cfg.stride));
  }
  return FeatureMap<T>{branch(image.data, phase), cfg.stride};
}

/// Resizes to exemplar_input_size^2 (bilinear) and runs the exemplar branch.
template <typename T>
ExemplarFeatureGrid<T> extract_exemplar_features(const ImageTensor<T>& image,
                                                 BackboneBranch<T>& branch,
                                                 const ModelConfig& cfg, Phase phase) {
  auto resized = ops::bilinear_resize(image.data, cfg.exemplar_input_size, cfg.exemplar_input_size);
  return ExemplarFeatureGrid<T>{branch(resized, phase)};
}

template <typename T>
FeatureMap<T> extract_main_features(const ImageTensor<T>& image, BackboneParams<T>& params,
                                    const ModelConfig& cfg, Phase phase) {
  return extract_main_features(image, params.main, cfg, phase);
}

template <typename T>
ExemplarFeatureGrid<T> extract_exemplar_features(const ImageTensor<T>& image,
                                                 BackboneParams<T>& params,
                                                 const ModelConfig& cfg, Phase phase) {
  return extract_exemplar_features(image, params.exemplar, cfg, phase);
}

}  // namespace gcnet
