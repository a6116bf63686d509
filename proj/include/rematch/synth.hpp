// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rematch/contrastive.hpp"
#include "rematch/errors.hpp"
#include "rematch/rng.hpp"
#include "rematch/sequence.hpp"
#include "rematch/tensor.hpp"

namespace rematch {

// Synthetic two-modality retrieval task. Every item is keyed by a latent
// unit vector z. The query rendering and the document rendering pass z
// through different fixed random projections: queries become discrete
// quantized tokens, documents become continuous "patch" vectors followed by
// a differently-projected token run. A hard negative is a rendering of z
// rotated by a fixed angle inside a random plane through z, so the latent
// cosine between an item and its hard negative is exactly cos(angle).
struct TaskConfig {
  int d_latent = 16;
  int text_len = 12;
  int n_patches = 8;
  int patch_dim = 128;  // must match the consuming model's d_model
  float noise_std = 0.1f;
  float hard_negative_angle = 0.35f;
  std::uint64_t seed = 0;

  void validate() const {
    if (d_latent < 2) throw ValidationError("d_latent must be >= 2");
    if (text_len < 1) throw ValidationError("text_len must be >= 1");
    if (n_patches < 0) throw ValidationError("n_patches must be >= 0");
    if (patch_dim < 1) throw ValidationError("patch_dim must be >= 1");
    if (!(noise_std >= 0.0f)) throw ValidationError("noise_std must be >= 0");
    if (!(hard_negative_angle > 0.0f) || !(hard_negative_angle < 1.5707f)) {
      throw ValidationError("hard_negative_angle must lie in (0, pi/2)");
    }
  }
};

struct LatentKey {
  std::vector<float> vec;  // unit norm, d_latent entries
  int class_id = -1;
};

struct EvalQuery {
  TokenSequence query;
  std::vector<TokenSequence> pool;
  int relevant_index = -1;
};

// Caches the fixed projection matrices for one TaskConfig so repeated
// generation is cheap. All randomness is counter-based: item `index` is
// byte-identical no matter how many other items are generated around it.
class SynthTask {
 public:
  explicit SynthTask(TaskConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    proj_query_ = unit_row_projection("proj_query", cfg_.text_len);
    proj_doc_ = unit_row_projection("proj_doc", cfg_.text_len);
    Rng rng = Rng::keyed(cfg_.seed, "proj_patch");
    proj_patch_ = TensorT<float>({cfg_.n_patches * cfg_.patch_dim, cfg_.d_latent});
    proj_patch_.fill_gaussian(rng, 1.0f);
  }

  const TaskConfig& config() const { return cfg_; }

  LatentKey latent_key(std::uint64_t index) const {
    Rng rng = Rng::keyed(cfg_.seed, "latent", {index});
    LatentKey k;
    k.vec = random_unit(rng, cfg_.d_latent);
    k.class_id = static_cast<int>(index);
    return k;
  }

  // The rotated latent used as the hard negative of item `index`.
  std::vector<float> hard_negative_key(std::uint64_t index) const {
    const LatentKey k = latent_key(index);
    Rng rng = Rng::keyed(cfg_.seed, "rotate", {index});
    return rotate(k.vec, cfg_.hard_negative_angle, rng);
  }

  TrainingInstance instance(std::uint64_t index) const {
    const LatentKey key = latent_key(index);
    const std::vector<float> neg = hard_negative_key(index);
    TrainingInstance out;
    out.query = render_query(key.vec, Rng::keyed(cfg_.seed, "query_noise", {index}));
    out.positive = render_document(key.vec, Rng::keyed(cfg_.seed, "doc_noise", {index}));
    out.hard_negative = render_document(neg, Rng::keyed(cfg_.seed, "neg_noise", {index}));
    return out;
  }

  // Evaluation item: a fresh query rendering of the key plus a candidate
  // pool holding the relevant document, hard distractors (rotations of the
  // key, same angle as training) and easy distractors (fresh latents).
  EvalQuery eval_query(std::uint64_t index, int pool_size, float hard_fraction) const {
    if (pool_size < 1) throw ValidationError("pool_size must be >= 1");
    if (!(hard_fraction >= 0.0f && hard_fraction <= 1.0f)) {
      throw ValidationError("hard_fraction must lie in [0, 1]");
    }
    Rng rng = Rng::keyed(cfg_.seed, "eval", {index});
    const std::vector<float> z = random_unit(rng, cfg_.d_latent);

    EvalQuery out;
    out.query = render_query(z, Rng::keyed(cfg_.seed, "eval_query_noise", {index}));
    const int n_distract = pool_size - 1;
    const int n_hard = static_cast<int>(std::lround(static_cast<double>(hard_fraction) * n_distract));
    out.relevant_index = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(pool_size)));

    int placed = 0;
    for (int slot = 0; slot < pool_size; ++slot) {
      if (slot == out.relevant_index) {
        out.pool.push_back(
            render_document(z, Rng::keyed(cfg_.seed, "eval_doc_noise", {index})));
        continue;
      }
      Rng drng = Rng::keyed(cfg_.seed, "eval_distractor", {index, static_cast<std::uint64_t>(placed)});
      std::vector<float> dz;
      if (placed < n_hard) {
        dz = rotate(z, cfg_.hard_negative_angle, drng);
      } else {
        dz = random_unit(drng, cfg_.d_latent);
      }
      out.pool.push_back(render_document(
          dz, Rng::keyed(cfg_.seed, "eval_distractor_noise", {index, static_cast<std::uint64_t>(placed)})));
      ++placed;
    }
    return out;
  }

  // Quantization bin of a scaled coordinate; clamped to [-3, 3).
  static int bin_of(double c) {
    double u = (c + 3.0) / 6.0;
    if (u < 0.0) u = 0.0;
    if (u >= 1.0) u = std::nextafter(1.0, 0.0);
    return static_cast<int>(u * kNumBins);
  }

 private:
  TensorT<float> unit_row_projection(const char* tag, int rows) const {
    Rng rng = Rng::keyed(cfg_.seed, tag);
    TensorT<float> p({rows, cfg_.d_latent});
    p.fill_gaussian(rng, 1.0f);
    for (int r = 0; r < rows; ++r) {
      double n = 0.0;
      for (int c = 0; c < cfg_.d_latent; ++c) {
        n += static_cast<double>(p.at(r, c)) * static_cast<double>(p.at(r, c));
      }
      n = std::sqrt(n);
      for (int c = 0; c < cfg_.d_latent; ++c) {
        p.at(r, c) = static_cast<float>(static_cast<double>(p.at(r, c)) / n);
      }
    }
    return p;
  }

  static std::vector<float> random_unit(Rng& rng, int d) {
    std::vector<float> v(static_cast<std::size_t>(d));
    double n = 0.0;
    while (n == 0.0) {
      for (int i = 0; i < d; ++i) {
        v[static_cast<std::size_t>(i)] = static_cast<float>(rng.next_gaussian());
      }
      n = 0.0;
      for (float x : v) n += static_cast<double>(x) * static_cast<double>(x);
      n = std::sqrt(n);
    }
    for (float& x : v) x = static_cast<float>(static_cast<double>(x) / n);
    return v;
  }

  // z' = cos(a) z + sin(a) u with u a random unit vector orthogonal to z.
  static std::vector<float> rotate(const std::vector<float>& z, float angle, Rng& rng) {
    const int d = static_cast<int>(z.size());
    std::vector<float> u;
    double un = 0.0;
    while (un < 1e-6) {  // retry if the draw is (nearly) parallel to z
      u = random_unit(rng, d);
      double dot = 0.0;
      for (int i = 0; i < d; ++i) dot += static_cast<double>(u[i]) * static_cast<double>(z[i]);
      un = 0.0;
      for (int i = 0; i < d; ++i) {
        u[static_cast<std::size_t>(i)] =
            static_cast<float>(static_cast<double>(u[i]) - dot * static_cast<double>(z[i]));
        un += static_cast<double>(u[i]) * static_cast<double>(u[i]);
      }
      un = std::sqrt(un);
    }
    std::vector<float> out(static_cast<std::size_t>(d));
    const double c = std::cos(static_cast<double>(angle));
    const double s = std::sin(static_cast<double>(angle));
    for (int i = 0; i < d; ++i) {
      out[static_cast<std::size_t>(i)] = static_cast<float>(
          c * static_cast<double>(z[i]) + s * static_cast<double>(u[i]) / un);
    }
    return out;
  }

  TokenSequence render_query(const std::vector<float>& z, Rng noise) const {
    TokenSequence s;
    s.push_token(kTaskTokenBase);
    const double scale = std::sqrt(static_cast<double>(cfg_.d_latent));
    for (int j = 0; j < cfg_.text_len; ++j) {
      double c = 0.0;
      for (int k = 0; k < cfg_.d_latent; ++k) {
        c += static_cast<double>(proj_query_.at(j, k)) * static_cast<double>(z[k]);
      }
      c = scale * c + static_cast<double>(cfg_.noise_std) * noise.next_gaussian();
      s.push_token(kQueryBinBase + bin_of(c));
    }
    return s;
  }

  TokenSequence render_document(const std::vector<float>& z, Rng noise) const {
    TokenSequence s;
    const double inv_sqrt_pd = 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim));
    for (int p = 0; p < cfg_.n_patches; ++p) {
      std::vector<float> patch(static_cast<std::size_t>(cfg_.patch_dim));
      for (int i = 0; i < cfg_.patch_dim; ++i) {
        double a = 0.0;
        const int row = p * cfg_.patch_dim + i;
        for (int k = 0; k < cfg_.d_latent; ++k) {
          a += static_cast<double>(proj_patch_.at(row, k)) * static_cast<double>(z[k]);
        }
        a += static_cast<double>(cfg_.noise_std) * noise.next_gaussian();
        patch[static_cast<std::size_t>(i)] = static_cast<float>(a * inv_sqrt_pd);
      }
      s.push_vec(std::move(patch));
    }
    const double scale = std::sqrt(static_cast<double>(cfg_.d_latent));
    for (int j = 0; j < cfg_.text_len; ++j) {
      double c = 0.0;
      for (int k = 0; k < cfg_.d_latent; ++k) {
        c += static_cast<double>(proj_doc_.at(j, k)) * static_cast<double>(z[k]);
      }
      c = scale * c + static_cast<double>(cfg_.noise_std) * noise.next_gaussian();
      s.push_token(kDocBinBase + bin_of(c));
    }
    return s;
  }

  TaskConfig cfg_;
  TensorT<float> proj_query_;
  TensorT<float> proj_doc_;
  TensorT<float> proj_patch_;
};

inline TrainingInstance gen_instance(const TaskConfig& cfg, std::uint64_t index) {
  return SynthTask(cfg).instance(index);
}

inline std::vector<EvalQuery> gen_eval_pool(const TaskConfig& cfg, int n_queries, int pool_size,
                                            float hard_fraction) {
  if (n_queries < 1) throw ValidationError("n_queries must be >= 1");
  if (pool_size < 2) throw ValidationError("pool_size must be >= 2 so ranking is non-trivial");
  SynthTask task(cfg);
  std::vector<EvalQuery> out;
  out.reserve(static_cast<std::size_t>(n_queries));
  for (int i = 0; i < n_queries; ++i) {
    out.push_back(task.eval_query(static_cast<std::uint64_t>(i), pool_size, hard_fraction));
  }
  return out;
}

}  // namespace rematch
