#pragma once

// Binary containers: 4-byte magic, little-endian u32 header length, UTF-8
// JSON header, little-endian payload (float32 band-sequential rasters or
// uint8 masks).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "fieldshift/core/error.hpp"
#include "fieldshift/core/raster.hpp"
#include "fieldshift/io/files.hpp"
#include "fieldshift/network.hpp"

namespace fieldshift::io {

using nlohmann::json;

enum class ContainerKind { Chip, Mask, Network };

inline constexpr int kFormatVersion = 1;

inline const char* magic(ContainerKind k) {
  switch (k) {
    case ContainerKind::Chip: return "FSCH";
    case ContainerKind::Mask: return "FSMK";
    case ContainerKind::Network: return "FSNW";
  }
  return "????";
}

struct RawContainer {
  ContainerKind kind = ContainerKind::Chip;
  json header;
  std::vector<std::uint8_t> payload;
};

inline std::vector<std::uint8_t> encode_container(ContainerKind kind, const json& header,
                                                  std::span<const std::uint8_t> payload) {
  const std::string h = header.dump();
  std::vector<std::uint8_t> out(4 + 4 + h.size() + payload.size());
  std::memcpy(out.data(), magic(kind), 4);
  const auto n = static_cast<std::uint32_t>(h.size());
  for (int i = 0; i < 4; ++i) out[4 + i] = static_cast<std::uint8_t>(n >> (8 * i));
  std::memcpy(out.data() + 8, h.data(), h.size());
  if (!payload.empty()) std::memcpy(out.data() + 8 + h.size(), payload.data(), payload.size());
  return out;
}

inline RawContainer decode_container(std::span<const std::uint8_t> bytes, ContainerKind expected, const std::string& what) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), magic(expected), 4) != 0)
    throw InputError(what + ": not a " + magic(expected) + " container");
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i) n |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (bytes.size() < 8 + static_cast<std::size_t>(n)) throw InputError(what + ": truncated header");
  RawContainer c;
  c.kind = expected;
  try {
    c.header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + n);
  } catch (const json::exception& e) {
    throw InputError(what + ": malformed header: " + e.what());
  }
  c.payload.assign(bytes.begin() + 8 + n, bytes.end());
  return c;
}

inline void write_container(const fs::path& path, ContainerKind kind, const json& header,
                            std::span<const std::uint8_t> payload) {
  write_atomic(path, encode_container(kind, header, payload));
}

inline RawContainer read_container(const fs::path& path, ContainerKind expected) {
  const auto bytes = read_bytes(path);
  return decode_container(bytes, expected, path.string());
}

namespace detail {

inline std::vector<std::uint8_t> floats_le(std::span<const float> v) {
  std::vector<std::uint8_t> out(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) out[4 * i + b] = static_cast<std::uint8_t>(u >> (8 * b));
  }
  return out;
}

inline std::vector<float> floats_from_le(std::span<const std::uint8_t> bytes, std::size_t count, const std::string& what) {
  if (bytes.size() != count * 4) throw InputError(what + ": payload size does not match the header");
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(bytes[4 * i + b]) << (8 * b);
    out[i] = std::bit_cast<float>(u);
  }
  return out;
}

}  // namespace detail

/// Float raster (chip imagery or prediction layer). `extra` is merged into
/// the header.
inline void write_raster(const fs::path& path, const Tensor<float>& t, const json& extra = json::object()) {
  json h = extra;
  h["format_version"] = kFormatVersion;
  h["dtype"] = "float32";
  h["bands"] = t.channels;
  h["height"] = t.height;
  h["width"] = t.width;
  write_container(path, ContainerKind::Chip, h, detail::floats_le(t.data));
}

template <typename T>
void write_raster(const fs::path& path, const Tensor<T>& t, const json& extra = json::object()) {
  write_raster(path, t.template cast<float>(), extra);
}

inline Tensor<float> read_raster(const fs::path& path, json* header_out = nullptr) {
  auto c = read_container(path, ContainerKind::Chip);
  Tensor<float> t;
  try {
    t.channels = c.header.at("bands").get<int>();
    t.height = c.header.at("height").get<int>();
    t.width = c.header.at("width").get<int>();
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": incomplete header: " + e.what());
  }
  t.data = detail::floats_from_le(c.payload, static_cast<std::size_t>(t.channels) * t.height * t.width, path.string());
  if (header_out) *header_out = std::move(c.header);
  return t;
}

inline json chip_header(const ChipInfo& info) {
  return json{{"tile_id", info.tile_id},     {"year", info.year},         {"offset_x", info.offset_x},
              {"offset_y", info.offset_y},   {"core_x", info.core_x},     {"core_y", info.core_y},
              {"core_size", info.core_size}, {"norm_scheme", info.norm_scheme}, {"degenerate", info.degenerate}};
}

inline void write_chip(const fs::path& path, const Chip& chip, const json& extra = json::object()) {
  json h = chip_header(chip.info);
  h.update(extra);
  write_raster(path, chip.pixels, h);
}

inline Chip read_chip(const fs::path& path) {
  json h;
  Chip c;
  c.pixels = read_raster(path, &h);
  c.info.tile_id = h.value("tile_id", "");
  c.info.year = h.value("year", "");
  c.info.offset_x = h.value("offset_x", 0);
  c.info.offset_y = h.value("offset_y", 0);
  c.info.core_x = h.value("core_x", 0);
  c.info.core_y = h.value("core_y", 0);
  c.info.core_size = h.value("core_size", 0);
  c.info.norm_scheme = h.value("norm_scheme", "");
  c.info.degenerate = h.value("degenerate", false);
  return c;
}

inline void write_mask(const fs::path& path, const LabelMask& m, const json& extra = json::object()) {
  json h = extra;
  h["format_version"] = kFormatVersion;
  h["dtype"] = "uint8";
  h["height"] = m.height;
  h["width"] = m.width;
  write_container(path, ContainerKind::Mask, h, m.data);
}

inline LabelMask read_mask(const fs::path& path, json* header_out = nullptr) {
  auto c = read_container(path, ContainerKind::Mask);
  LabelMask m;
  try {
    m.height = c.header.at("height").get<int>();
    m.width = c.header.at("width").get<int>();
  } catch (const json::exception& e) {
    throw InputError(path.string() + ": incomplete header: " + e.what());
  }
  if (c.payload.size() != static_cast<std::size_t>(m.height) * m.width)
    throw InputError(path.string() + ": payload size does not match the header");
  m.data = std::move(c.payload);
  if (header_out) *header_out = std::move(c.header);
  return m;
}

inline json arch_to_json(const ArchSpec& a) {
  return json{{"depth", a.depth},
              {"base_width", a.base_width},
              {"in_bands", a.in_bands},
              {"classes", a.classes},
              {"dropout_rate_train", a.dropout_rate_train},
              {"dropout_kind", to_string(a.dropout_kind)},
              {"dropout_placement", to_string(a.dropout_placement)}};
}

inline ArchSpec arch_from_json(const json& j) {
  ArchSpec a;
  a.depth = j.value("depth", a.depth);
  a.base_width = j.value("base_width", a.base_width);
  a.in_bands = j.value("in_bands", a.in_bands);
  a.classes = j.value("classes", a.classes);
  a.dropout_rate_train = j.value("dropout_rate_train", a.dropout_rate_train);
  a.dropout_kind = parse_dropout_kind(j.value("dropout_kind", to_string(a.dropout_kind)));
  a.dropout_placement = parse_dropout_placement(j.value("dropout_placement", to_string(a.dropout_placement)));
  return a;
}

inline void write_checkpoint(const fs::path& path, const NetworkParams<float>& p, const json& extra = json::object()) {
  json h = extra;
  h["format_version"] = kFormatVersion;
  h["dtype"] = "float32";
  h["arch"] = arch_to_json(p.arch);
  h["parameter_count"] = p.values.size();
  json layers = json::array();
  for (const auto& l : p.layers)
    layers.push_back({{"name", l.name},
                      {"in_channels", l.in_channels},
                      {"out_channels", l.out_channels},
                      {"kernel", l.kernel},
                      {"weight_offset", l.weight_offset},
                      {"bias_offset", l.bias_offset}});
  h["layers"] = layers;
  write_container(path, ContainerKind::Network, h, detail::floats_le(p.values));
}

inline NetworkParams<float> read_checkpoint(const fs::path& path, json* header_out = nullptr) {
  RawContainer c;
  try {
    c = read_container(path, ContainerKind::Network);
  } catch (const InputError& e) {
    throw CheckpointError(e.what());
  }
  NetworkParams<float> p;
  try {
    p.arch = arch_from_json(c.header.at("arch"));
    validate(p.arch);
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad arch block: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  p.layers = layer_table(p.arch);
  const std::size_t n = parameter_count(p.arch);
  if (c.header.value("parameter_count", std::size_t{0}) != n || c.payload.size() != n * 4)
    throw CheckpointError(path.string() + ": parameter count does not match its architecture");
  p.values = detail::floats_from_le(c.payload, n, path.string());
  if (header_out) *header_out = std::move(c.header);
  return p;
}

}  // namespace fieldshift::io
