#pragma once

// On-disk synthetic datasets: a directory of PNGs plus dataset.json holding the
// generator spec and one entry per record (file, count, split, seed, boxes).

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "gcnet/data.hpp"
#include "gcnet/image_io.hpp"
#include "gcnet/serialization.hpp"

namespace gcnet {

inline constexpr const char* kDatasetManifest = "dataset.json";

inline nlohmann::json record_to_json(const DatasetRecord& r, const std::string& file) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : r.exemplar_boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
  return {{"id", r.id}, {"file", file}, {"count", r.count}, {"split", to_string(r.split)},
          {"seed", r.seed}, {"exemplar_boxes", boxes}};
}

/// Writes every record's pixels as <id>.png and the manifest. Returns the
/// manifest path.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir, const std::vector<DatasetRecord>& records,
                                           const SyntheticSceneSpec& spec) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw IoError("cannot create dataset directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& r : records) {
    const std::string file = r.id + ".png";
    save_image(dir / file, record_image(r));
    entries.push_back(record_to_json(r, file));
  }
  const nlohmann::json manifest = {{"format", "gcnet-synthetic"}, {"version", 1}, {"spec", to_json(spec)},
                                   {"records", entries}};
  const auto path = dir / kDatasetManifest;
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp);
    if (!os) throw IoError("cannot write " + path.string());
    os << manifest.dump(2) << '\n';
    if (!os) throw IoError("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + path.string() + " into place: " + ec.message());
  return path;
}

/// Records of one split from a directory written by write_dataset. Images are
/// referenced by path.
inline std::vector<DatasetRecord> load_dataset_dir(const std::filesystem::path& dir, Split split) {
  if (!std::filesystem::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
  const auto path = dir / kDatasetManifest;
  if (!std::filesystem::exists(path)) throw IoError("dataset manifest not found: " + path.string());
  std::ifstream is(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("malformed dataset manifest " + path.string() + ": " + e.what());
  }
  std::vector<DatasetRecord> out;
  try {
    for (const auto& e : j.at("records")) {
      if (split_from_string(e.at("split").get<std::string>()) != split) continue;
      DatasetRecord r;
      r.id = e.at("id").get<std::string>();
      r.image_path = (dir / e.at("file").get<std::string>()).string();
      r.count = e.at("count").get<std::int64_t>();
      r.split = split;
      r.seed = e.at("seed").get<std::uint64_t>();
      for (const auto& b : e.at("exemplar_boxes")) {
        r.exemplar_boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                    b.at(3).get<double>()});
      }
      if (r.count < 0) throw DataError("record '" + r.id + "' has a negative count");
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset manifest " + path.string() + ": " + e.what());
  }
  return out;
}

}  // namespace gcnet
