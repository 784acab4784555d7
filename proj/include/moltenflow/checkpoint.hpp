// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//
//   bytes 0..7    magic "MFCKPT01"
//   bytes 8..15   header length N, little-endian uint64
//   next N bytes  UTF-8 JSON header
//   remainder     tensor payload, little-endian IEEE-754 float64
//
// The header always carries "format", "version", and "tensors": a list of
// {"name", "shape", "offset"} where offset counts float64 values from the
// start of the payload. Everything else (model kind, layer kinds, bounding
// intervals, seed, step count, ...) lives under "meta".
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "moltenflow/error.hpp"
#include "moltenflow/tensor.hpp"

namespace moltenflow {

using json = nlohmann::json;

struct Checkpoint {
  json meta = json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, const Tensor& t) { tensors.emplace_back(std::move(name), t); }

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw ContractViolation("checkpoint: missing tensor '" + name + "'");
  }
};

inline constexpr char kCheckpointMagic[9] = "MFCKPT01";
inline constexpr int kCheckpointVersion = 1;

namespace detail {
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  json header;
  header["format"] = "moltenflow-checkpoint";
  header["version"] = kCheckpointVersion;
  header["meta"] = ck.meta;
  json list = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    list.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  header["tensors"] = list;
  const std::string text = header.dump();

  std::string out(kCheckpointMagic, 8);
  detail::put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + 8 * offset);
  for (const auto& [name, t] : ck.tensors)
    for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic");
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = detail::get_u64(raw + 8);
  if (16 + hlen > bytes.size()) throw IoError("checkpoint: truncated header");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  if (header.value("format", "") != "moltenflow-checkpoint")
    throw IoError("checkpoint: unknown format tag");
  if (header.value("version", 0) != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version");
  Checkpoint ck;
  ck.meta = header.value("meta", json::object());
  const unsigned char* payload = raw + 16 + hlen;
  const std::size_t payload_values = (bytes.size() - 16 - hlen) / 8;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::uint64_t off = entry.at("offset").get<std::uint64_t>();
    const std::size_t n = shape_size(shape);
    if (off + n > payload_values) throw IoError("checkpoint: truncated payload");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i)
      data[i] = std::bit_cast<double>(detail::get_u64(payload + 8 * (off + i)));
    ck.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
  }
  return ck;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file", path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file", path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write", path);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace moltenflow
