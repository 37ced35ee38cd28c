#pragma once

// Checkpoint container:
//
//   bytes 0..7    magic "GCNETCKP"
//   bytes 8..11   uint32 LE schema version
//   bytes 12..19  uint64 LE manifest length M
//   next M bytes  JSON manifest
//   remainder     payload of little-endian IEEE-754 float32 arrays
//
// The manifest lists every array as {name, kind, shape, offset, nbytes} with
// offsets relative to the payload start, plus the model config snapshot, the
// training step and (optionally) optimizer metadata.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "gcnet/model.hpp"
#include "gcnet/serialization.hpp"

namespace gcnet {

inline constexpr char kCheckpointMagic[8] = {'G', 'C', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointSchemaVersion = 1;

/// AdamW moments keyed by parameter name.
struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<float>> first_moment;
  std::map<std::string, Tensor<float>> second_moment;
};

struct Checkpoint {
  std::uint32_t schema_version = kCheckpointSchemaVersion;
  ModelConfig config;
  std::int64_t step = 0;
  std::map<std::string, Tensor<float>> parameters;
  std::map<std::string, Tensor<float>> buffers;
  std::optional<OptimizerState> optimizer;
  nlohmann::json metadata = nlohmann::json::object();  // free-form (e.g. the resolved run config)
};

namespace detail {

template <typename U>
U to_little_endian(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    U out;
    auto* src = reinterpret_cast<const unsigned char*>(&v);
    auto* dst = reinterpret_cast<unsigned char*>(&out);
    for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
    return out;
  }
  return v;
}

template <typename U>
void write_scalar(std::ostream& os, U v) {
  v = to_little_endian(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_scalar(const std::string& buf, std::size_t pos) {
  U v;
  std::memcpy(&v, buf.data() + pos, sizeof(U));
  return to_little_endian(v);
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<const Tensor<float>*> order;
  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const char* kind, const Tensor<float>& t) {
    const std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * sizeof(float);
    tensors.push_back({{"name", name}, {"kind", kind}, {"shape", t.shape()}, {"offset", offset}, {"nbytes", nbytes}});
    order.push_back(&t);
    offset += nbytes;
  };
  for (const auto& [name, t] : ckpt.parameters) add(name, "param", t);
  for (const auto& [name, t] : ckpt.buffers) add(name, "buffer", t);
  nlohmann::json opt = nullptr;
  if (ckpt.optimizer) {
    opt = {{"type", "adamw"}, {"step", ckpt.optimizer->step}};
    for (const auto& [name, t] : ckpt.optimizer->first_moment) add(name, "adam_m", t);
    for (const auto& [name, t] : ckpt.optimizer->second_moment) add(name, "adam_v", t);
  }
  const nlohmann::json manifest = {{"schema_version", ckpt.schema_version},
                                   {"config", to_json(ckpt.config)},
                                   {"step", ckpt.step},
                                   {"optimizer", opt},
                                   {"metadata", ckpt.metadata},
                                   {"payload_bytes", offset},
                                   {"tensors", tensors}};
  const std::string text = manifest.dump();

  // Write to a sibling temp file and rename so readers never see a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::write_scalar<std::uint32_t>(os, ckpt.schema_version);
    detail::write_scalar<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* t : order) {
      for (float v : t->values()) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
        detail::write_scalar(os, bits);
      }
    }
    if (!os) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = sizeof(kCheckpointMagic) + 4 + 8;
  if (buf.size() < header || std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CorruptCheckpointError("not a checkpoint file (bad magic or truncated header): " + path.string());
  }
  Checkpoint ckpt;
  ckpt.schema_version = detail::read_scalar<std::uint32_t>(buf, 8);
  if (ckpt.schema_version != kCheckpointSchemaVersion) {
    throw CheckpointVersionError("checkpoint schema version " + std::to_string(ckpt.schema_version) +
                                 " is not supported (expected " + std::to_string(kCheckpointSchemaVersion) + ")");
  }
  const auto manifest_len = detail::read_scalar<std::uint64_t>(buf, 12);
  if (manifest_len > buf.size() - header) throw CorruptCheckpointError("checkpoint manifest is truncated");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(buf.substr(header, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  const std::size_t payload_start = header + manifest_len;
  const std::size_t payload_size = buf.size() - payload_start;
  try {
    if (manifest.at("schema_version").get<std::uint32_t>() != ckpt.schema_version) {
      throw CorruptCheckpointError("manifest schema version disagrees with header");
    }
    if (manifest.at("payload_bytes").get<std::uint64_t>() != payload_size) {
      throw CorruptCheckpointError("checkpoint payload is truncated or has trailing bytes");
    }
    ckpt.config = model_config_from_json(manifest.at("config"));
    ckpt.step = manifest.at("step").get<std::int64_t>();
    if (manifest.contains("metadata")) ckpt.metadata = manifest["metadata"];
    if (!manifest.at("optimizer").is_null()) {
      ckpt.optimizer = OptimizerState{};
      ckpt.optimizer->step = manifest["optimizer"].at("step").get<std::int64_t>();
    }
    for (const auto& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto kind = entry.at("kind").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
      if (static_cast<std::uint64_t>(shape_numel(shape)) * sizeof(float) != nbytes ||
          offset + nbytes > payload_size) {
        throw CorruptCheckpointError("tensor '" + name + "' has an inconsistent extent");
      }
      std::vector<float> values(nbytes / sizeof(float));
      for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<float>(detail::read_scalar<std::uint32_t>(buf, payload_start + offset + 4 * i));
      }
      Tensor<float> t(shape, std::move(values));
      if (kind == "param") {
        ckpt.parameters.emplace(name, std::move(t));
      } else if (kind == "buffer") {
        ckpt.buffers.emplace(name, std::move(t));
      } else if ((kind == "adam_m" || kind == "adam_v") && ckpt.optimizer) {
        (kind == "adam_m" ? ckpt.optimizer->first_moment : ckpt.optimizer->second_moment).emplace(name, std::move(t));
      } else {
        throw CorruptCheckpointError("unknown tensor kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpointError(std::string("malformed checkpoint manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw CorruptCheckpointError(std::string("malformed checkpoint config: ") + e.what());
  }
  return ckpt;
}

/// Snapshot of every instantiated parameter and buffer.
inline Checkpoint make_checkpoint(GcnetParams<float>& params, const ModelConfig& cfg, std::int64_t step = 0,
                                  std::optional<OptimizerState> optimizer = std::nullopt) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.step = step;
  for (auto& [name, v] : params.named_parameters(cfg)) ckpt.parameters.emplace(name, v->value());
  for (auto& [name, t] : params.named_buffers()) ckpt.buffers.emplace(name, *t);
  ckpt.optimizer = std::move(optimizer);
  return ckpt;
}

/// Copies checkpoint arrays into `params` (built for `cfg`). Every parameter
/// must be present with an identical shape.
inline void restore_params(const Checkpoint& ckpt, GcnetParams<float>& params, const ModelConfig& cfg) {
  auto check = [](const std::string& name, const Shape& want, const std::map<std::string, Tensor<float>>& src) {
    auto it = src.find(name);
    if (it == src.end()) throw CheckpointShapeError("checkpoint has no array named '" + name + "'");
    if (it->second.shape() != want) {
      throw CheckpointShapeError("array '" + name + "' has shape " + shape_str(it->second.shape()) +
                                 " but the model expects " + shape_str(want));
    }
    return &it->second;
  };
  for (auto& [name, v] : params.named_parameters(cfg)) v->mutable_value() = *check(name, v->shape(), ckpt.parameters);
  for (auto& [name, t] : params.named_buffers()) *t = *check(name, t->shape(), ckpt.buffers);
}

/// Builds a model for the checkpoint's own config and restores it.
inline GcnetParams<float> params_from_checkpoint(const Checkpoint& ckpt) {
  GcnetParams<float> params(ckpt.config);
  restore_params(ckpt, params, ckpt.config);
  return params;
}

}  // namespace gcnet
