#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dispatcher/model.hpp"

// Checkpoint layout:
//
//   "DSP1"                      4 bytes magic
//   manifest length             uint32, little-endian
//   manifest                    UTF-8 JSON: {"format_version", "config",
//                               "metadata", "tensors": [{"name", "shape",
//                               "offset", "nbytes"}]}
//   parameter blobs             float64 little-endian, in manifest order;
//                               offsets are relative to the first blob byte
namespace dispatcher {

inline constexpr std::array<char, 4> kCheckpointMagic = {'D', 'S', 'P', '1'};
inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void put_u32_le(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline std::uint32_t get_u32_le(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(const unsigned char* b) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const LmModel& model,
                                        const nlohmann::json& metadata = nlohmann::json::object()) {
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = model.config();
  manifest["metadata"] = metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::string blobs;
  for (const auto& [name, t] : model.parameters()) {
    manifest["tensors"].push_back({{"name", name},
                                   {"shape", t.shape()},
                                   {"offset", blobs.size()},
                                   {"nbytes", t.size() * sizeof(double)}});
    for (double v : t.data()) detail::put_f64_le(blobs, v);
  }
  const std::string text = manifest.dump();
  std::ostringstream out;
  out.write(kCheckpointMagic.data(), 4);
  detail::put_u32_le(out, static_cast<std::uint32_t>(text.size()));
  out << text << blobs;
  return out.str();
}

inline void save_checkpoint(const std::filesystem::path& path, const LmModel& model,
                            const nlohmann::json& metadata = nlohmann::json::object()) {
  const std::string bytes = serialize_checkpoint(model, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

struct LoadedCheckpoint {
  LmModel model;
  nlohmann::json metadata;
};

inline LoadedCheckpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || std::memcmp(raw, kCheckpointMagic.data(), 4) != 0) {
    throw DataError(origin + ": not a DSP1 checkpoint");
  }
  const std::size_t manifest_len = detail::get_u32_le(raw + 4);
  if (8 + manifest_len > bytes.size()) throw DataError(origin + ": truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(8, manifest_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": malformed manifest: " + e.what());
  }
  if (manifest.value("format_version", 0) != kCheckpointFormatVersion) {
    throw DataError(origin + ": unsupported format_version " +
                    manifest.value("format_version", nlohmann::json()).dump());
  }
  ModelConfig config;
  try {
    config = manifest.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(origin + ": bad config: " + e.what());
  }
  LmModel model(config);
  const std::size_t blob_start = 8 + manifest_len;
  const auto& entries = manifest.at("tensors");
  NamedParameters params = model.parameters();
  if (entries.size() != params.size()) {
    throw DataError(origin + ": manifest lists " + std::to_string(entries.size()) +
                    " tensors, config implies " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, tensor] = params[i];
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != name) {
      throw DataError(origin + ": tensor " + std::to_string(i) + " is '" +
                      e.at("name").get<std::string>() + "', expected '" + name + "'");
    }
    if (e.at("shape").get<Shape>() != tensor.shape()) {
      throw DataError(origin + ": tensor '" + name + "' has shape " +
                      to_string(e.at("shape").get<Shape>()) + ", config implies " +
                      to_string(tensor.shape()));
    }
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t nbytes = e.at("nbytes").get<std::size_t>();
    if (nbytes != tensor.size() * sizeof(double) || blob_start + offset + nbytes > bytes.size()) {
      throw DataError(origin + ": tensor '" + name + "' blob out of range");
    }
    auto values = tensor.mutable_data();
    for (std::size_t k = 0; k < values.size(); ++k) {
      values[k] = detail::get_f64_le(raw + blob_start + offset + 8 * k);
    }
  }
  return {std::move(model), manifest.value("metadata", nlohmann::json::object())};
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

}  // namespace dispatcher
