// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "rematch/autodiff.hpp"
#include "rematch/errors.hpp"
#include "rematch/sequence.hpp"

namespace rematch {

// One retrieval training example: a query, its matching document, and a
// mined hard negative document.
struct TrainingInstance {
  TokenSequence query;
  TokenSequence positive;
  TokenSequence hard_negative;
};

struct SimilarityConfig {
  float temperature = 0.02f;

  void validate() const {
    if (!(temperature > 0.0f)) throw ValidationError("temperature must be > 0");
  }
};

// Cosine similarity of raw embedding vectors, accumulated in double so that
// candidate rankings are stable.
inline double cosine_sim(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) {
    throw ShapeError("cosine_sim operands must share a non-zero size");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
  }
  if (na == 0.0 || nb == 0.0) throw DegenerateVectorError("cosine_sim of zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Temperature-scaled similarity kernel exp(cos(a, b) / tau). Training never
// exponentiates this directly (losses stay in log space); this form exists
// for inspection and scoring.
inline double similarity_kernel(std::span<const float> a, std::span<const float> b,
                                const SimilarityConfig& cfg) {
  cfg.validate();
  return std::exp(cosine_sim(a, b) / static_cast<double>(cfg.temperature));
}

// Index of the candidate with the highest cosine similarity to the query;
// ties resolve to the lowest index.
inline int retrieve_top1(std::span<const float> query,
                         const std::vector<std::vector<float>>& candidates) {
  if (candidates.empty()) throw ContractError("retrieve_top1 needs at least one candidate");
  int best = 0;
  double best_sim = cosine_sim(query, candidates[0]);
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double s = cosine_sim(query, candidates[i]);
    if (s > best_sim) {
      best_sim = s;
      best = static_cast<int>(i);
    }
  }
  return best;
}

// Fused embeddings of one instance, as nodes on a shared tape.
struct InstanceEmbeddings {
  ValueId query;
  ValueId positive;
  ValueId negative;
};

// Batch contrastive loss. For instance i with fused embeddings (q, d+, d-):
//
//   L_i = -log( phi(q, d+) / (phi(q, d+) + N_i) )
//   N_i = phi(q, d-) + sum_{d in B_i} phi(q, d)
//
// where phi(a, b) = exp(cos(a, b) / tau) and B_i holds the positive and
// hard-negative documents of every *other* instance in the batch. With
// s = cos/tau this collapses to logsumexp(all terms) - s+, evaluated
// entirely in log space. Returns the batch mean.
template <class Real>
ValueId info_nce(TapeT<Real>& tape, std::span<const InstanceEmbeddings> batch,
                 Real temperature) {
  if (batch.empty()) throw ContractError("info_nce needs a non-empty batch");
  if (!(temperature > Real(0))) throw ValidationError("temperature must be > 0");
  const Real inv_tau = Real(1) / temperature;
  const std::size_t b = batch.size();
  std::vector<ValueId> losses;
  losses.reserve(b);
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<ValueId> sims;
    sims.reserve(2 * b);
    // Order: positive first (index 0), own hard negative, then other
    // instances' documents.
    sims.push_back(tape.cosine(batch[i].query, batch[i].positive));
    sims.push_back(tape.cosine(batch[i].query, batch[i].negative));
    for (std::size_t j = 0; j < b; ++j) {
      if (j == i) continue;
      sims.push_back(tape.cosine(batch[i].query, batch[j].positive));
      sims.push_back(tape.cosine(batch[i].query, batch[j].negative));
    }
    ValueId scaled = tape.scale(tape.stack_scalars(sims), inv_tau);
    losses.push_back(tape.sub(tape.logsumexp(scaled), tape.pick(scaled, 0)));
  }
  return tape.mean_all(tape.stack_scalars(losses));
}

// Convenience: the same loss on plain float vectors (builds a short-lived
// double tape internally; used by tests and diagnostics).
inline double info_nce_value(const std::vector<std::array<std::vector<float>, 3>>& batch,
                             float temperature) {
  TapeT<double> tape(false);
  std::vector<InstanceEmbeddings> embs;
  embs.reserve(batch.size());
  for (const auto& [q, p, n] : batch) {
    auto lift = [&tape](const std::vector<float>& v) {
      TensorT<double> t({static_cast<int>(v.size())});
      for (std::size_t i = 0; i < v.size(); ++i) t[static_cast<std::int64_t>(i)] = v[i];
      return tape.constant(std::move(t));
    };
    embs.push_back({lift(q), lift(p), lift(n)});
  }
  ValueId loss = info_nce<double>(tape, embs, static_cast<double>(temperature));
  return tape.value(loss)[0];
}

}  // namespace rematch
