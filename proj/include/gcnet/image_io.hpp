#pragma once

// Image and heatmap files via OpenCV. Images in memory are float RGB (3, H, W)
// in [0, 1].

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"

#include "gcnet/data.hpp"
#include "gcnet/errors.hpp"

namespace gcnet {

inline Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("image not found: " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw IoError("cannot decode image: " + path.string());
  Image img({3, bgr.rows, bgr.cols});
  for (int y = 0; y < bgr.rows; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < bgr.cols; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(row[x][2 - c]) / 255.0f;
    }
  }
  return img;
}

inline void save_image(const std::filesystem::path& path, const Image& img) {
  if (img.rank() != 3 || img.shape()[0] != 3) throw ShapeError("save_image expects (3, H, W), got " + shape_str(img.shape()));
  const int h = static_cast<int>(img.shape()[1]), w = static_cast<int>(img.shape()[2]);
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        row[x][2 - c] = cv::saturate_cast<uchar>(std::clamp(img.at(c, y, x), 0.0f, 1.0f) * 255.0f);
      }
    }
  }
  if (!cv::imwrite(path.string(), bgr)) throw IoError("cannot write image: " + path.string());
}

/// Record pixels: the in-memory image when present, otherwise the file.
inline Image record_image(const DatasetRecord& rec) {
  if (rec.image) return *rec.image;
  if (rec.image_path.empty()) throw DataError("record '" + rec.id + "' has neither pixels nor a path");
  return load_image(rec.image_path);
}

struct HeatmapInfo {
  double min = 0;
  double max = 0;
  Index height = 0;
  Index width = 0;
};

/// Writes a (h, w) map as a colour PNG, min-max normalised and optionally
/// upsampled to (out_h, out_w), plus a JSON sidecar `<path>.json` holding the
/// raw value range so the colours can be mapped back to similarity values.
inline HeatmapInfo save_heatmap(const std::filesystem::path& path, const Tensor<float>& map, Index out_h = 0,
                                Index out_w = 0) {
  if (map.rank() != 2) throw ShapeError("heatmap expects (h, w), got " + shape_str(map.shape()));
  const int h = static_cast<int>(map.shape()[0]), w = static_cast<int>(map.shape()[1]);
  HeatmapInfo info;
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  info.min = *lo;
  info.max = *hi;
  const double span = info.max > info.min ? info.max - info.min : 1.0;
  cv::Mat gray(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      gray.at<uchar>(y, x) = cv::saturate_cast<uchar>((map.at(y, x) - info.min) / span * 255.0 + 0.5);
    }
  }
  if (out_h > 0 && out_w > 0) {
    cv::resize(gray, gray, cv::Size(static_cast<int>(out_w), static_cast<int>(out_h)), 0, 0, cv::INTER_LINEAR);
  }
  cv::Mat colour;
  cv::applyColorMap(gray, colour, cv::COLORMAP_JET);
  if (!cv::imwrite(path.string(), colour)) throw IoError("cannot write heatmap: " + path.string());
  info.height = colour.rows;
  info.width = colour.cols;

  const nlohmann::json side = {{"min", info.min}, {"max", info.max}, {"map_height", h}, {"map_width", w},
                               {"height", info.height}, {"width", info.width}, {"colormap", "jet"}};
  std::ofstream os(path.string() + ".json");
  if (!os) throw IoError("cannot write heatmap sidecar: " + path.string() + ".json");
  os << side.dump(2) << "\n";
  return info;
}

/// Stacks equally sized (3, H, W) images into (B, 3, H, W).
inline Tensor<float> stack_images(const std::vector<Image>& images) {
  if (images.empty()) throw ShapeError("cannot stack an empty image list");
  const Shape& s = images.front().shape();
  Tensor<float> out({static_cast<Index>(images.size()), s[0], s[1], s[2]});
  const Index n = images.front().numel();
  for (std::size_t b = 0; b < images.size(); ++b) {
    if (images[b].shape() != s) {
      throw ShapeError("cannot stack " + shape_str(images[b].shape()) + " with " + shape_str(s));
    }
    std::copy(images[b].data(), images[b].data() + n, out.data() + static_cast<Index>(b) * n);
  }
  return out;
}

}  // namespace gcnet
