#pragma once

// FSC147 ingestion. Expected layout under the dataset root:
//
//   annotation_FSC147_384.json      {"<image>": {"points": [[x, y], ...],
//                                     "box_examples_coordinates": [[[x, y] x4], ...],
//                                     "H": ..., "W": ...}, ...}
//   Train_Test_Val_FSC_147.json     {"train": [...], "val": [...], "test": [...]}
//   images_384_VarV2/<image>
//
// Counts come from the point lists; density maps are never read.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gcnet/data.hpp"
#include "gcnet/errors.hpp"

namespace gcnet {

inline constexpr const char* kFscAnnotationFile = "annotation_FSC147_384.json";
inline constexpr const char* kFscSplitFile = "Train_Test_Val_FSC_147.json";
inline constexpr const char* kFscImageDir = "images_384_VarV2";
inline constexpr const char* kDataRootEnv = "GCNET_DATA_ROOT";

/// Published split sizes.
inline std::int64_t fsc147_expected_size(Split s) {
  switch (s) {
    case Split::train: return 3659;
    case Split::test: return 1286;
    case Split::val: return 1190;
  }
  return 0;
}

using WarningSink = std::function<void(const std::string&)>;

inline void warn_to_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

/// Dataset root from the environment; empty when unset.
inline std::filesystem::path default_data_root() {
  const char* v = std::getenv(kDataRootEnv);
  return v ? std::filesystem::path(v) : std::filesystem::path();
}

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("missing file: " + path.string());
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline Box parse_exemplar_box(const nlohmann::json& corners, double width, double height) {
  if (!corners.is_array() || corners.empty()) throw DataError("exemplar box must be a non-empty corner list");
  double x1 = 1e300, y1 = 1e300, x2 = -1e300, y2 = -1e300;
  for (const auto& c : corners) {
    if (!c.is_array() || c.size() != 2) throw DataError("exemplar corner must be [x, y]");
    const double x = c[0].get<double>(), y = c[1].get<double>();
    x1 = std::min(x1, x);
    x2 = std::max(x2, x);
    y1 = std::min(y1, y);
    y2 = std::max(y2, y);
  }
  // Annotations occasionally stray a pixel outside the frame.
  if (width > 0) {
    x1 = std::clamp(x1, 0.0, width);
    x2 = std::clamp(x2, 0.0, width);
  }
  if (height > 0) {
    y1 = std::clamp(y1, 0.0, height);
    y2 = std::clamp(y2, 0.0, height);
  }
  return {x1, y1, x2, y2};
}

}  // namespace detail

/// Image names per split from the split file.
inline std::map<Split, std::vector<std::string>> load_fsc147_splits(const std::filesystem::path& root) {
  const auto j = detail::read_json_file(root / kFscSplitFile);
  std::map<Split, std::vector<std::string>> out;
  try {
    for (auto s : {Split::train, Split::val, Split::test}) {
      out[s] = j.at(to_string(s)).get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed split file: ") + e.what());
  }
  return out;
}

/// Records for one split. Images are referenced by path and decoded lazily.
/// A split whose size differs from the published one triggers a warning only.
inline std::vector<DatasetRecord> load_fsc147(const std::filesystem::path& root, Split split,
                                              const WarningSink& warn = warn_to_stderr) {
  if (root.empty()) throw IoError(std::string("no dataset root given and ") + kDataRootEnv + " is unset");
  if (!std::filesystem::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  const auto names = load_fsc147_splits(root).at(split);
  const auto ann = detail::read_json_file(root / kFscAnnotationFile);
  if (!ann.is_object()) throw DataError("annotation file must map image names to entries");

  const auto expected = fsc147_expected_size(split);
  if (static_cast<std::int64_t>(names.size()) != expected && warn) {
    warn(std::string(to_string(split)) + " split has " + std::to_string(names.size()) + " images, expected " +
         std::to_string(expected));
  }

  std::vector<DatasetRecord> out;
  out.reserve(names.size());
  for (const auto& name : names) {
    auto it = ann.find(name);
    if (it == ann.end()) throw DataError("image '" + name + "' is listed in the split file but not annotated");
    const auto& e = *it;
    DatasetRecord rec;
    rec.id = name;
    rec.image_path = (root / kFscImageDir / name).string();
    rec.split = split;
    try {
      const auto& pts = e.at("points");
      if (!pts.is_array()) throw DataError("'points' of '" + name + "' is not a list");
      for (const auto& p : pts) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
          throw DataError("point of '" + name + "' must be [x, y]");
        }
      }
      rec.count = static_cast<std::int64_t>(pts.size());
      const double w = e.contains("W") ? e["W"].get<double>() : 0.0;
      const double h = e.contains("H") ? e["H"].get<double>() : 0.0;
      if (e.contains("box_examples_coordinates")) {
        for (const auto& b : e["box_examples_coordinates"]) rec.exemplar_boxes.push_back(detail::parse_exemplar_box(b, w, h));
      }
    } catch (const nlohmann::json::exception& ex) {
      throw DataError("malformed annotation for '" + name + "': " + ex.what());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace gcnet
