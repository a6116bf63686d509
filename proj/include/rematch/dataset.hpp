// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rematch/binio.hpp"
#include "rematch/contrastive.hpp"
#include "rematch/errors.hpp"
#include "rematch/sequence.hpp"
#include "rematch/synth.hpp"

namespace rematch {

// Dataset container (extension-agnostic; the CLI uses .rmds):
//
//   magic   "RMDATSET"                   8 bytes
//   u32     format version (currently 1)
//   u64     JSON header length
//   bytes   JSON header {"kind": "train"|"eval", "count": n, "task": {...},
//            "pool_size"/"hard_fraction" for eval files}
//   records sequence data, see below
//
// A sequence is encoded as u32 element count followed by one tagged element
// each: u8 kind (0 = token, 1 = continuous row), then i32 token id or
// u32 dim + dim f32 values. Segments/positions are not stored; sequences
// rehydrate with the default layout (segment 0, consecutive positions),
// which is exactly how the generator produced them.

inline constexpr char kDatasetMagic[8] = {'R', 'M', 'D', 'A', 'T', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct TrainDataset {
  TaskConfig task;
  std::vector<TrainingInstance> instances;
};

struct EvalDataset {
  TaskConfig task;
  float hard_fraction = 0.0f;
  std::vector<EvalQuery> queries;
};

namespace detail {

inline void put_sequence(std::string& out, const TokenSequence& seq) {
  binio::put_u32(out, static_cast<std::uint32_t>(seq.elements.size()));
  for (const auto& e : seq.elements) {
    if (e.is_vec()) {
      out.push_back(1);
      binio::put_u32(out, static_cast<std::uint32_t>(e.vec.size()));
      for (float x : e.vec) binio::put_f32(out, x);
    } else {
      out.push_back(0);
      binio::put_i32(out, e.token);
    }
  }
}

inline TokenSequence get_sequence(binio::ByteReader& r, const std::string& origin) {
  TokenSequence seq;
  const std::uint32_t n = r.u32("sequence length");
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::uint8_t kind = r.u8("element kind");
    if (kind == 0) {
      const std::int32_t tok = r.i32("token id");
      if (tok < 0) throw IoError(origin + ": negative token id in record");
      seq.push_token(tok);
    } else if (kind == 1) {
      const std::uint32_t dim = r.u32("row dim");
      if (dim == 0 || dim > (1u << 20)) {
        throw IoError(origin + ": implausible continuous row dim " + std::to_string(dim));
      }
      std::vector<float> v(dim);
      for (std::uint32_t j = 0; j < dim; ++j) v[j] = r.f32("row value");
      seq.push_vec(std::move(v));
    } else {
      throw IoError(origin + ": unknown element kind " + std::to_string(kind));
    }
  }
  return seq;
}

inline nlohmann::json task_to_json(const TaskConfig& t) {
  return nlohmann::json{{"d_latent", t.d_latent},
                        {"text_len", t.text_len},
                        {"n_patches", t.n_patches},
                        {"patch_dim", t.patch_dim},
                        {"noise_std", t.noise_std},
                        {"hard_negative_angle", t.hard_negative_angle},
                        {"seed", t.seed}};
}

inline TaskConfig task_from_json(const nlohmann::json& j, const std::string& origin) {
  TaskConfig t;
  try {
    t.d_latent = j.at("d_latent").get<int>();
    t.text_len = j.at("text_len").get<int>();
    t.n_patches = j.at("n_patches").get<int>();
    t.patch_dim = j.at("patch_dim").get<int>();
    t.noise_std = j.at("noise_std").get<float>();
    t.hard_negative_angle = j.at("hard_negative_angle").get<float>();
    t.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError(origin + ": task config in header is malformed: " + e.what());
  }
  try {
    t.validate();
  } catch (const ValidationError& e) {
    throw CorruptHeaderError(origin + ": task config in header is invalid: " + e.what());
  }
  return t;
}

inline std::string frame(const nlohmann::json& header, const std::string& records) {
  std::string out;
  out.append(kDatasetMagic, 8);
  binio::put_u32(out, kDatasetVersion);
  const std::string hs = header.dump();
  binio::put_u64(out, hs.size());
  out += hs;
  out += records;
  return out;
}

inline nlohmann::json open_frame(binio::ByteReader& r, const std::string& origin,
                                 const char* want_kind) {
  const std::string magic = r.bytes(8, "magic");
  if (std::memcmp(magic.data(), kDatasetMagic, 8) != 0) {
    throw CorruptHeaderError(origin + ": not a dataset file (bad magic)");
  }
  const std::uint32_t version = r.u32("format version");
  if (version != kDatasetVersion) {
    throw FormatVersionError(origin + ": unsupported dataset version " + std::to_string(version) +
                             " (expected " + std::to_string(kDatasetVersion) + ")");
  }
  const std::uint64_t hlen = r.u64("header length");
  const std::string hs = r.bytes(hlen, "JSON header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError(origin + ": header is not valid JSON: " + e.what());
  }
  if (!header.is_object() || !header.contains("kind") || !header["kind"].is_string()) {
    throw CorruptHeaderError(origin + ": header lacks a \"kind\" field");
  }
  if (header["kind"].get<std::string>() != want_kind) {
    throw ValidationError(origin + ": file holds \"" + header["kind"].get<std::string>() +
                          "\" data, expected \"" + want_kind + "\"");
  }
  if (!header.contains("count") || !header["count"].is_number_unsigned()) {
    throw CorruptHeaderError(origin + ": header lacks an unsigned \"count\" field");
  }
  if (!header.contains("task") || !header["task"].is_object()) {
    throw CorruptHeaderError(origin + ": header lacks a \"task\" config object");
  }
  return header;
}

}  // namespace detail

inline void write_train_dataset(const std::string& path, const TrainDataset& ds) {
  nlohmann::json header{{"kind", "train"},
                        {"count", ds.instances.size()},
                        {"task", detail::task_to_json(ds.task)}};
  std::string records;
  for (const auto& inst : ds.instances) {
    detail::put_sequence(records, inst.query);
    detail::put_sequence(records, inst.positive);
    detail::put_sequence(records, inst.hard_negative);
  }
  binio::write_file(path, detail::frame(header, records));
}

inline TrainDataset read_train_dataset(const std::string& path) {
  const std::string buf = binio::read_file(path);
  binio::ByteReader r(buf, path);
  const nlohmann::json header = detail::open_frame(r, path, "train");
  TrainDataset ds;
  ds.task = detail::task_from_json(header.at("task"), path);
  const std::uint64_t count = header["count"].get<std::uint64_t>();
  ds.instances.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    TrainingInstance inst;
    inst.query = detail::get_sequence(r, path);
    inst.positive = detail::get_sequence(r, path);
    inst.hard_negative = detail::get_sequence(r, path);
    ds.instances.push_back(std::move(inst));
  }
  r.expect_end();
  return ds;
}

inline void write_eval_dataset(const std::string& path, const EvalDataset& ds) {
  nlohmann::json header{{"kind", "eval"},
                        {"count", ds.queries.size()},
                        {"hard_fraction", ds.hard_fraction},
                        {"task", detail::task_to_json(ds.task)}};
  std::string records;
  for (const auto& q : ds.queries) {
    detail::put_sequence(records, q.query);
    binio::put_u32(records, static_cast<std::uint32_t>(q.pool.size()));
    binio::put_i32(records, q.relevant_index);
    for (const auto& d : q.pool) detail::put_sequence(records, d);
  }
  binio::write_file(path, detail::frame(header, records));
}

inline EvalDataset read_eval_dataset(const std::string& path) {
  const std::string buf = binio::read_file(path);
  binio::ByteReader r(buf, path);
  const nlohmann::json header = detail::open_frame(r, path, "eval");
  EvalDataset ds;
  ds.task = detail::task_from_json(header.at("task"), path);
  if (header.contains("hard_fraction") && header["hard_fraction"].is_number()) {
    ds.hard_fraction = header["hard_fraction"].get<float>();
  }
  const std::uint64_t count = header["count"].get<std::uint64_t>();
  ds.queries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EvalQuery q;
    q.query = detail::get_sequence(r, path);
    const std::uint32_t pool = r.u32("pool size");
    q.relevant_index = r.i32("relevant index");
    if (pool == 0 || q.relevant_index < 0 || q.relevant_index >= static_cast<int>(pool)) {
      throw IoError(path + ": eval record " + std::to_string(i) + " has relevant index " +
                    std::to_string(q.relevant_index) + " outside its pool of " +
                    std::to_string(pool));
    }
    q.pool.reserve(pool);
    for (std::uint32_t p = 0; p < pool; ++p) q.pool.push_back(detail::get_sequence(r, path));
    ds.queries.push_back(std::move(q));
  }
  r.expect_end();
  return ds;
}

}  // namespace rematch
