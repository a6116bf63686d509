// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rematch/binio.hpp"
#include "rematch/errors.hpp"
#include "rematch/params.hpp"
#include "rematch/tensor.hpp"

namespace rematch {

// Checkpoint container (extension-agnostic; the CLI uses .rmck):
//
//   magic   "RMCHKPNT"                   8 bytes
//   u32     format version (currently 1)
//   u64     JSON header length
//   bytes   JSON header:
//             {"tensors": [{"name": ..., "shape": [...], "offset": bytes}...],
//              "meta": caller-provided object (config snapshot, step, ...)}
//   blob    float32 values, tensors packed back to back in table order
//
// Save and load are exact inverses: loading a file and saving the result
// reproduces the original byte for byte (the header JSON is emitted
// canonically and the blob layout is fully determined by the store order).

inline constexpr char kCheckpointMagic[8] = {'R', 'M', 'C', 'H', 'K', 'P', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  ParamStoreT<float> store;
  nlohmann::json meta;
};

inline void save_checkpoint(const std::string& path, const ParamStoreT<float>& store,
                            const nlohmann::json& meta) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  std::uint64_t offset = 0;
  for (const auto& name : store.names()) {
    const TensorT<float>& t = store.at(name);
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (std::int64_t i = 0; i < t.numel(); ++i) binio::put_f32(blob, t[i]);
    offset += static_cast<std::uint64_t>(t.numel()) * 4;
  }
  nlohmann::json header{{"tensors", std::move(tensors)}, {"meta", meta}};

  std::string out;
  out.append(kCheckpointMagic, 8);
  binio::put_u32(out, kCheckpointVersion);
  const std::string hs = header.dump();
  binio::put_u64(out, hs.size());
  out += hs;
  out += blob;
  binio::write_file(path, out);
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  const std::string buf = binio::read_file(path);
  binio::ByteReader r(buf, path);
  const std::string magic = r.bytes(8, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 8) != 0) {
    throw CorruptHeaderError(path + ": not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = r.u32("format version");
  if (version != kCheckpointVersion) {
    throw FormatVersionError(path + ": unsupported checkpoint version " +
                             std::to_string(version) + " (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint64_t hlen = r.u64("header length");
  const std::string hs = r.bytes(hlen, "JSON header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError(path + ": header is not valid JSON: " + e.what());
  }
  if (!header.is_object() || !header.contains("tensors") || !header["tensors"].is_array()) {
    throw CorruptHeaderError(path + ": header lacks a \"tensors\" table");
  }

  LoadedCheckpoint out;
  out.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t expect_offset = 0;
  for (const auto& entry : header["tensors"]) {
    std::string name;
    std::vector<int> shape;
    std::uint64_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<std::vector<int>>();
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CorruptHeaderError(path + ": malformed tensor table entry: " + e.what());
    }
    if (offset != expect_offset) {
      throw CorruptHeaderError(path + ": tensor \"" + name + "\" at offset " +
                               std::to_string(offset) + ", expected " +
                               std::to_string(expect_offset) + " (table must be gapless)");
    }
    std::int64_t numel = 1;
    for (int d : shape) {
      if (d <= 0) throw CorruptHeaderError(path + ": tensor \"" + name + "\" has bad shape");
      numel *= d;
    }
    TensorT<float> t(shape);
    for (std::int64_t i = 0; i < numel; ++i) t[i] = r.f32("tensor value");
    if (out.store.has(name)) {
      throw CorruptHeaderError(path + ": duplicate tensor name \"" + name + "\"");
    }
    out.store.add(name, std::move(t));
    expect_offset += static_cast<std::uint64_t>(numel) * 4;
  }
  r.expect_end();
  return out;
}

}  // namespace rematch
