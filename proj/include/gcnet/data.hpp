#pragma once

// Dataset records, the count-exact synthetic scene generator, the resize
// policy of both branches and label-preserving augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "gcnet/errors.hpp"
#include "gcnet/ops.hpp"
#include "gcnet/rng.hpp"
#include "gcnet/tensor.hpp"

namespace gcnet {

/// (3, H, W) RGB image with values in [0, 1].
using Image = Tensor<float>;

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

/// Axis-aligned box in pixel coordinates, x2/y2 exclusive.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
  bool inside(double width, double height) const {
    return x1 >= 0 && y1 >= 0 && x2 <= width && y2 <= height && x1 <= x2 && y1 <= y2;
  }
};

inline double iou(const Box& a, const Box& b) {
  const Box inter{std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
  const double i = inter.area();
  const double u = a.area() + b.area() - i;
  return u > 0 ? i / u : 0.0;
}

struct DatasetRecord {
  std::string id;
  std::string image_path;      // on-disk source, empty for in-memory records
  std::optional<Image> image;  // in-memory source
  std::int64_t count = 0;
  std::vector<Box> exemplar_boxes;
  Split split = Split::train;
  std::uint64_t seed = 0;  // per-record seed (synthetic records)
};

// ---------------------------------------------------------------- synthetic scenes

enum class ShapeFamily { disk, square, triangle, blob };

inline const char* to_string(ShapeFamily f) {
  constexpr const char* names[] = {"disk", "square", "triangle", "blob"};
  return names[static_cast<int>(f)];
}

inline ShapeFamily shape_family_from_string(const std::string& s) {
  for (auto f : {ShapeFamily::disk, ShapeFamily::square, ShapeFamily::triangle, ShapeFamily::blob}) {
    if (s == to_string(f)) return f;
  }
  throw ConfigError("unknown shape family '" + s + "'");
}

struct SyntheticSceneSpec {
  Index height = 128;
  Index width = 128;
  std::vector<ShapeFamily> families = {ShapeFamily::disk, ShapeFamily::square, ShapeFamily::triangle,
                                       ShapeFamily::blob};
  std::int64_t count_min = 1;
  std::int64_t count_max = 20;
  double radius_min = 4.0;  // object half-extent in pixels
  double radius_max = 7.0;
  double orientation_min = 0.0;
  double orientation_max = 2.0 * std::numbers::pi;
  double noise = 0.03;  // std-dev of additive Gaussian noise
  bool distractors = false;
  std::int64_t distractor_max = 4;
  double iou_cap = 0.0;  // max pairwise bounding-box IoU
  int max_attempts = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (height < 8 || width < 8) throw ConfigError("synthetic canvas too small");
    if (families.empty()) throw ConfigError("synthetic spec needs at least one shape family");
    if (count_min < 0 || count_max < count_min) throw ConfigError("invalid synthetic count range");
    if (radius_min <= 0 || radius_max < radius_min) throw ConfigError("invalid synthetic radius range");
    if (iou_cap < 0 || iou_cap > 1) throw ConfigError("iou_cap must be in [0, 1]");
  }
};

struct PlacedObject {
  ShapeFamily family;
  double cx, cy, radius, angle, phase;
  Box box;
};

namespace detail {

inline bool inside_shape(const PlacedObject& o, double x, double y) {
  const double dx = x - o.cx, dy = y - o.cy;
  const double c = std::cos(o.angle), s = std::sin(o.angle);
  const double u = c * dx + s * dy, v = -s * dx + c * dy;
  switch (o.family) {
    case ShapeFamily::disk:
      return dx * dx + dy * dy <= o.radius * o.radius;
    case ShapeFamily::square: {
      const double h = o.radius / std::numbers::sqrt2;
      return std::abs(u) <= h && std::abs(v) <= h;
    }
    case ShapeFamily::triangle: {
      // Equilateral triangle inscribed in the circle of radius r.
      for (int k = 0; k < 3; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 3.0;
        if (std::cos(a) * u + std::sin(a) * v > 0.5 * o.radius) return false;
      }
      return true;
    }
    case ShapeFamily::blob: {
      const double r = std::sqrt(dx * dx + dy * dy);
      const double theta = std::atan2(v, u);
      return r <= o.radius * (0.8 + 0.2 * std::sin(3.0 * theta + o.phase));
    }
  }
  return false;
}

struct Rgb {
  float r, g, b;
};

inline Rgb random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
          static_cast<float>(rng.uniform())};
}

inline float color_distance(Rgb a, Rgb b) {
  return std::abs(a.r - b.r) + std::abs(a.g - b.g) + std::abs(a.b - b.b);
}

inline void paint(Image& img, const PlacedObject& o, Rgb color, bool textured) {
  const Index h = img.dim(1), w = img.dim(2);
  const auto y0 = std::max<Index>(0, static_cast<Index>(std::floor(o.box.y1)));
  const auto y1 = std::min<Index>(h, static_cast<Index>(std::ceil(o.box.y2)));
  const auto x0 = std::max<Index>(0, static_cast<Index>(std::floor(o.box.x1)));
  const auto x1 = std::min<Index>(w, static_cast<Index>(std::ceil(o.box.x2)));
  for (Index y = y0; y < y1; ++y) {
    for (Index x = x0; x < x1; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      if (!inside_shape(o, px, py)) continue;
      float k = 1.0f;
      if (textured) k = 0.75f + 0.25f * static_cast<float>(std::sin(0.9 * (px - o.cx) + o.phase) *
                                                           std::cos(0.9 * (py - o.cy)));
      img.at(0, y, x) = color.r * k;
      img.at(1, y, x) = color.g * k;
      img.at(2, y, x) = color.b * k;
    }
  }
}

/// Samples `n` non-conflicting placements; throws DataError when infeasible.
inline std::vector<PlacedObject> place_objects(const SyntheticSceneSpec& spec, ShapeFamily family,
                                               std::int64_t n, std::vector<PlacedObject>& occupied,
                                               Rng& rng) {
  std::vector<PlacedObject> placed;
  for (std::int64_t i = 0; i < n; ++i) {
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      PlacedObject o;
      o.family = family;
      o.radius = rng.uniform(spec.radius_min, spec.radius_max);
      o.cx = rng.uniform(o.radius, static_cast<double>(spec.width) - o.radius);
      o.cy = rng.uniform(o.radius, static_cast<double>(spec.height) - o.radius);
      o.angle = rng.uniform(spec.orientation_min, spec.orientation_max);
      o.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      o.box = {o.cx - o.radius, o.cy - o.radius, o.cx + o.radius, o.cy + o.radius};
      ok = std::all_of(occupied.begin(), occupied.end(), [&](const PlacedObject& p) {
        const double v = iou(o.box, p.box);
        // Boxes with IoU 0 may still touch; keep a one-pixel gap at cap 0 so
        // counted objects never merge.
        if (spec.iou_cap == 0.0) {
          return o.box.x2 + 1 <= p.box.x1 || p.box.x2 + 1 <= o.box.x1 || o.box.y2 + 1 <= p.box.y1 ||
                 p.box.y2 + 1 <= o.box.y1;
        }
        return v <= spec.iou_cap;
      });
      if (ok) {
        occupied.push_back(o);
        placed.push_back(o);
      }
    }
    if (!ok) {
      throw DataError("infeasible packing: could not place object " + std::to_string(i + 1) + " of " +
                      std::to_string(n) + " under IoU cap " + std::to_string(spec.iou_cap));
    }
  }
  return placed;
}

}  // namespace detail

/// Renders one record; (spec.seed, index) fully determine the result.
inline DatasetRecord generate_synthetic_record(const SyntheticSceneSpec& spec, std::int64_t index,
                                               Split split = Split::train) {
  spec.validate();
  DatasetRecord rec;
  rec.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(index));
  rec.id = "synth_" + std::to_string(index);
  rec.split = split;
  Rng rng(rec.seed);

  rec.count = rng.uniform_int(spec.count_min, spec.count_max);
  const auto family = spec.families[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(spec.families.size()) - 1))];
  const detail::Rgb background = detail::random_color(rng);
  detail::Rgb color = detail::random_color(rng);
  while (detail::color_distance(color, background) < 0.9f) color = detail::random_color(rng);

  Image img({3, spec.height, spec.width});
  for (Index y = 0; y < spec.height; ++y) {
    for (Index x = 0; x < spec.width; ++x) {
      img.at(0, y, x) = background.r;
      img.at(1, y, x) = background.g;
      img.at(2, y, x) = background.b;
    }
  }

  std::vector<PlacedObject> occupied;
  auto objects = detail::place_objects(spec, family, rec.count, occupied, rng);
  const bool textured = family == ShapeFamily::blob;
  for (const auto& o : objects) detail::paint(img, o, color, textured);

  if (spec.distractors && spec.families.size() > 1) {
    ShapeFamily other = family;
    while (other == family) {
      other = spec.families[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(spec.families.size()) - 1))];
    }
    detail::Rgb dcolor = detail::random_color(rng);
    while (detail::color_distance(dcolor, background) < 0.9f || detail::color_distance(dcolor, color) < 0.9f) {
      dcolor = detail::random_color(rng);
    }
    const auto n = rng.uniform_int(0, spec.distractor_max);
    for (const auto& o : detail::place_objects(spec, other, n, occupied, rng)) detail::paint(img, o, dcolor, false);
  }

  if (spec.noise > 0) {
    for (auto& v : img.values()) {
      v = std::clamp(v + static_cast<float>(spec.noise * rng.normal()), 0.0f, 1.0f);
    }
  }

  for (std::size_t i = 0; i < objects.size() && i < 3; ++i) {
    Box b = objects[i].box;
    b.x1 = std::max(0.0, b.x1);
    b.y1 = std::max(0.0, b.y1);
    b.x2 = std::min(static_cast<double>(spec.width), b.x2);
    b.y2 = std::min(static_cast<double>(spec.height), b.y2);
    rec.exemplar_boxes.push_back(b);
  }
  rec.image = std::move(img);
  return rec;
}

/// Records [first, first + n) of the synthetic stream.
inline std::vector<DatasetRecord> generate_synthetic(const SyntheticSceneSpec& spec, std::int64_t n_records,
                                                     std::int64_t first = 0, Split split = Split::train) {
  std::vector<DatasetRecord> out;
  out.reserve(static_cast<std::size_t>(std::max<std::int64_t>(0, n_records)));
  for (std::int64_t i = 0; i < n_records; ++i) out.push_back(generate_synthetic_record(spec, first + i, split));
  return out;
}

// ---------------------------------------------------------------- resize policy

enum class ResizeMode { train_main, exemplar_branch };

struct ResizeBand {
  Index min_side = 384;
  Index max_side = 1584;
  Index multiple = 16;
  Index exemplar_size = 512;
};

inline Index round_to_multiple(double v, Index multiple) {
  const auto m = static_cast<double>(multiple);
  return std::max<Index>(multiple, static_cast<Index>(std::floor(v / m + 0.5)) * multiple);
}

struct ImageSize {
  Index height = 0, width = 0;
  friend bool operator==(const ImageSize&, const ImageSize&) = default;
};

/// Target size: the longer side is scaled into [min_side, max_side] keeping the
/// aspect ratio, then both sides are rounded to the nearest multiple (ties up).
inline ImageSize resize_target(ImageSize in, ResizeMode mode, const ResizeBand& band = {}) {
  if (in.height < 1 || in.width < 1) throw ShapeError("resize_target: empty image");
  if (mode == ResizeMode::exemplar_branch) return {band.exemplar_size, band.exemplar_size};
  const double longer = static_cast<double>(std::max(in.height, in.width));
  double scale = 1.0;
  if (longer > static_cast<double>(band.max_side)) scale = static_cast<double>(band.max_side) / longer;
  if (longer < static_cast<double>(band.min_side)) scale = static_cast<double>(band.min_side) / longer;
  return {round_to_multiple(static_cast<double>(in.height) * scale, band.multiple),
          round_to_multiple(static_cast<double>(in.width) * scale, band.multiple)};
}

inline Image resize_image(const Image& img, ImageSize size) {
  if (img.dim(1) == size.height && img.dim(2) == size.width) return img;
  NoGradGuard no_grad;
  auto v = Var<float>::leaf(img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
  return ops::bilinear_resize(v, size.height, size.width).value().reshaped({img.dim(0), size.height, size.width});
}

inline Image resize_policy(const Image& img, ResizeMode mode, const ResizeBand& band = {}) {
  if (img.rank() != 3 || img.numel() == 0) throw ShapeError("resize_policy: expects a non-empty (3,H,W) image");
  return resize_image(img, resize_target({img.dim(1), img.dim(2)}, mode, band));
}

// ---------------------------------------------------------------- augmentation

struct AugmentationConfig {
  double scale_min = 0.75;
  double scale_max = 1.25;
  bool random_scale = true;
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  int cutout_count = 1;
  double cutout_fraction = 0.125;  // patch side relative to the shorter image side
  Index multiple = 16;             // scaled sizes stay divisible by the stride
  std::uint64_t seed = 0;

  void validate() const {
    if (hflip_prob < 0 || hflip_prob > 1 || vflip_prob < 0 || vflip_prob > 1) {
      throw ConfigError("flip probabilities must be in [0, 1]");
    }
    if (scale_min <= 0 || scale_max < scale_min) throw ConfigError("invalid augmentation scale range");
    if (cutout_count < 0 || cutout_fraction < 0 || cutout_fraction > 1) throw ConfigError("invalid cutout settings");
  }

  /// Configuration that leaves every image untouched.
  static AugmentationConfig none() {
    AugmentationConfig c;
    c.random_scale = false;
    c.hflip_prob = 0;
    c.vflip_prob = 0;
    c.cutout_count = 0;
    return c;
  }
};

inline Image flip_horizontal(const Image& img) {
  Image out(img.shape());
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out.at(k, y, x) = img.at(k, y, w - 1 - x);
  return out;
}

inline Image flip_vertical(const Image& img) {
  Image out(img.shape());
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out.at(k, y, x) = img.at(k, h - 1 - y, x);
  return out;
}

struct AugmentedSample {
  Image image;
  std::int64_t count;
};

/// Random scaling, flips and cutout. The count label is never modified.
inline AugmentedSample augment(const Image& image, std::int64_t count, const AugmentationConfig& cfg,
                               std::uint64_t sample_seed) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, sample_seed));
  Image img = image;
  if (cfg.random_scale) {
    const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
    img = resize_image(img, {round_to_multiple(static_cast<double>(img.dim(1)) * s, cfg.multiple),
                             round_to_multiple(static_cast<double>(img.dim(2)) * s, cfg.multiple)});
  }
  if (rng.bernoulli(cfg.hflip_prob)) img = flip_horizontal(img);
  if (rng.bernoulli(cfg.vflip_prob)) img = flip_vertical(img);
  const Index h = img.dim(1), w = img.dim(2);
  const auto side = static_cast<Index>(std::round(cfg.cutout_fraction * static_cast<double>(std::min(h, w))));
  for (int k = 0; k < cfg.cutout_count && side > 0; ++k) {
    const Index y0 = rng.uniform_int(0, h - side), x0 = rng.uniform_int(0, w - side);
    for (Index c = 0; c < img.dim(0); ++c)
      for (Index y = y0; y < y0 + side; ++y)
        for (Index x = x0; x < x0 + side; ++x) img.at(c, y, x) = 0.0f;
  }
  return {std::move(img), count};
}

}  // namespace gcnet
