// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rematch/autodiff.hpp"
#include "rematch/backbone.hpp"
#include "rematch/errors.hpp"
#include "rematch/params.hpp"
#include "rematch/sequence.hpp"

namespace rematch {

enum class Side { kQuery, kDocument };

inline const char* side_name(Side s) { return s == Side::kQuery ? "query" : "document"; }

// K contextual embedding rows produced by one encode, still on the tape.
struct MultiEmbedding {
  ValueId rows;  // [k x d_model]
  ValueId fused; // [d_model], mean of rows
  Side side = Side::kQuery;
  int k = 0;
};

// Appends K learnable tokens (one set per side) to the input, runs the
// causal backbone, and reads the hidden states above those K positions as
// the multi-token embedding. Fusion is the row mean.
template <class Real>
class EmbedderT {
 public:
  EmbedderT(const BackboneT<Real>* backbone, int k) : backbone_(backbone), k_(k) {
    if (k < 1) throw ValidationError("embedding token count k must be >= 1");
  }

  int k() const { return k_; }

  void init_params(ParamStoreT<Real>& store, std::uint64_t seed) const {
    auto gauss = [&](const std::string& name) {
      TensorT<Real> t({k_, backbone_->config().d_model});
      Rng rng = Rng::keyed(seed, "init", {hash_tag(name)});
      t.fill_gaussian(rng, Real(0.02));
      store.add(name, std::move(t));
    };
    gauss("embed.lq");
    gauss("embed.ld");
  }

  // Input sequence positions must be the default consecutive layout; the
  // chat prefix and the learnable tokens extend it.
  MultiEmbedding encode(ParamSessionT<Real>& ps, TapeT<Real>& tape, const TokenSequence& seq,
                        Side side, bool chat_wrap) const {
    if (seq.length() == 0) throw ContractError("cannot encode an empty sequence");
    ModelInputT<Real> input;
    int pos = 0;
    if (chat_wrap) {
      input.add_token(kTokChatSystem, pos++);
      input.add_token(kTokChatUser, pos++);
    }
    input.append_sequence(seq, /*position_offset=*/pos);
    pos += seq.length();
    if (chat_wrap) input.add_token(kTokChatAssistant, pos++);

    ValueId learnable = ps[side == Side::kQuery ? "embed.lq" : "embed.ld"];
    std::vector<int> lpos(static_cast<std::size_t>(k_));
    for (int i = 0; i < k_; ++i) lpos[static_cast<std::size_t>(i)] = pos + i;
    input.add_ref(learnable, k_, lpos);

    const int t = input.length();
    auto mask = std::make_shared<AttentionMask>(
        causal_mask(t, backbone_->config().max_seq_len));
    ValueId hidden = backbone_->forward(ps, tape, input, std::move(mask));

    MultiEmbedding me;
    me.rows = tape.slice_rows(hidden, t - k_, t);
    me.fused = tape.mean_rows(me.rows);
    me.side = side;
    me.k = k_;
    return me;
  }

  // Mean pairwise squared cosine between distinct embedding rows:
  //   2 / (K (K-1)) * sum_{i<j} (e_i . e_j)^2   over unit-normalized rows.
  // Zero (constant) for K == 1, where no pair exists.
  ValueId orthogonality_loss(TapeT<Real>& tape, const MultiEmbedding& me) const {
    if (me.k == 1) return tape.scalar_constant(Real(0));
    const int k = me.k;
    ValueId n = tape.l2_normalize_rows(me.rows);
    ValueId gram = tape.matmul(n, n, false, true);  // [k x k] of cosines
    ValueId sq = tape.mul(gram, gram);
    TensorT<Real> upper({k, k});
    for (int i = 0; i < k; ++i) {
      for (int j = i + 1; j < k; ++j) upper.at(i, j) = Real(1);
    }
    ValueId masked = tape.mul(sq, tape.constant(upper));
    // mean_all * k^2 recovers the sum over the strict upper triangle.
    const Real factor = static_cast<Real>(k) * static_cast<Real>(k) * Real(2) /
                        (static_cast<Real>(k) * static_cast<Real>(k - 1));
    return tape.scale(tape.mean_all(masked), factor);
  }

 private:
  const BackboneT<Real>* backbone_;
  int k_;
};

using Embedder = EmbedderT<float>;

}  // namespace rematch
