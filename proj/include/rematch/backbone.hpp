// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "rematch/autodiff.hpp"
#include "rematch/errors.hpp"
#include "rematch/mask.hpp"
#include "rematch/params.hpp"
#include "rematch/rng.hpp"
#include "rematch/sequence.hpp"
#include "rematch/tensor.hpp"

namespace rematch {

struct BackboneConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 512;
  int max_seq_len = 512;
  float ln_eps = 1e-5f;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (n_layers < 0) throw ValidationError("n_layers must be >= 0");
    if (d_model < 2) throw ValidationError("d_model must be >= 2");
    if (n_heads < 1) throw ValidationError("n_heads must be >= 1");
    if (d_model % n_heads != 0) {
      throw ValidationError("d_model (" + std::to_string(d_model) +
                            ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
    }
    if (d_ff < 1) throw ValidationError("d_ff must be >= 1");
    if (vocab_size < 16) throw ValidationError("vocab_size must be >= 16");
    if (max_seq_len < 1) throw ValidationError("max_seq_len must be >= 1");
    if (!(ln_eps > 0.0f)) throw ValidationError("ln_eps must be > 0");
  }
};

// Causal (lower-triangular) mask of length t, bounded by the model capacity.
inline AttentionMask causal_mask(int t, int max_seq_len) {
  if (t < 1) throw ShapeError("causal_mask length must be >= 1");
  if (t > max_seq_len) {
    throw CapacityError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                        std::to_string(max_seq_len));
  }
  return AttentionMask::causal(t);
}

// Model input: an ordered list of row blocks that concatenate to the [T x d]
// input matrix. Token blocks go through the embedding table; const blocks
// are raw continuous rows (bypassing the table); ref blocks inject rows that
// already live on the tape (learnable tokens, projected features), so
// gradients flow back into them.
template <class Real>
struct ModelInputT {
  struct Block {
    enum class Kind { kTokens, kConst, kRef };
    Kind kind = Kind::kTokens;
    std::vector<int> tokens;
    TensorT<Real> rows;   // kConst payload
    ValueId ref;          // kRef payload
    int ref_rows = 0;
  };

  std::vector<Block> blocks;
  std::vector<int> positions;
  std::vector<int> segments;

  int length() const { return static_cast<int>(positions.size()); }

  void add_token(int token, int position, int segment = 0) {
    if (token < 0) throw VocabError("negative token id");
    if (blocks.empty() || blocks.back().kind != Block::Kind::kTokens) {
      Block b;
      b.kind = Block::Kind::kTokens;
      blocks.push_back(std::move(b));
    }
    blocks.back().tokens.push_back(token);
    positions.push_back(position);
    segments.push_back(segment);
  }

  void add_const_row(const std::vector<float>& v, int position, int segment = 0) {
    TensorT<Real> row({1, static_cast<int>(v.size())});
    for (std::size_t i = 0; i < v.size(); ++i) row[static_cast<std::int64_t>(i)] = static_cast<Real>(v[i]);
    Block b;
    b.kind = Block::Kind::kConst;
    b.rows = std::move(row);
    blocks.push_back(std::move(b));
    positions.push_back(position);
    segments.push_back(segment);
  }

  // Injects `rows` tape rows; `row_positions` must have one entry per row.
  void add_ref(ValueId ref, int rows, const std::vector<int>& row_positions, int segment = 0) {
    if (static_cast<int>(row_positions.size()) != rows) {
      throw ContractError("ref block needs one position per row");
    }
    Block b;
    b.kind = Block::Kind::kRef;
    b.ref = ref;
    b.ref_rows = rows;
    blocks.push_back(std::move(b));
    for (int p : row_positions) {
      positions.push_back(p);
      segments.push_back(segment);
    }
  }

  // Appends a whole sequence, keeping its element positions shifted by
  // `position_offset` and labeling every element with `segment`.
  void append_sequence(const TokenSequence& seq, int position_offset = 0, int segment = 0) {
    seq.validate();
    for (int i = 0; i < seq.length(); ++i) {
      const auto& e = seq.elements[static_cast<std::size_t>(i)];
      const int pos = seq.positions[static_cast<std::size_t>(i)] + position_offset;
      if (e.is_vec()) {
        add_const_row(e.vec, pos, segment);
      } else {
        add_token(e.token, pos, segment);
      }
    }
  }
};

using ModelInput = ModelInputT<float>;

// Decoder-only pre-norm transformer over mixed discrete/continuous inputs
// with an arbitrary boolean attention mask.
template <class Real>
class BackboneT {
 public:
  explicit BackboneT(BackboneConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const BackboneConfig& config() const { return cfg_; }

  // Creates all parameters. Each tensor draws from its own name-keyed
  // stream, so two models sharing a seed get identical tensors for every
  // name they share, regardless of what else either model allocates.
  void init_params(ParamStoreT<Real>& store, std::uint64_t seed) const {
    auto gauss = [&](const std::string& name, std::vector<int> shape, Real stddev) {
      TensorT<Real> t(std::move(shape));
      Rng rng = Rng::keyed(seed, "init", {hash_tag(name)});
      t.fill_gaussian(rng, stddev);
      store.add(name, std::move(t));
    };
    auto fill = [&](const std::string& name, std::vector<int> shape, Real v) {
      store.add(name, TensorT<Real>::full(std::move(shape), v));
    };
    const Real w_std = Real(0.02);
    gauss("tok_embed", {cfg_.vocab_size, cfg_.d_model}, w_std);
    gauss("pos_embed", {cfg_.max_seq_len, cfg_.d_model}, w_std);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      fill(p + "ln1.gain", {cfg_.d_model}, Real(1));
      fill(p + "ln1.bias", {cfg_.d_model}, Real(0));
      gauss(p + "attn.wq", {cfg_.d_model, cfg_.d_model}, w_std);
      gauss(p + "attn.wk", {cfg_.d_model, cfg_.d_model}, w_std);
      gauss(p + "attn.wv", {cfg_.d_model, cfg_.d_model}, w_std);
      gauss(p + "attn.wo", {cfg_.d_model, cfg_.d_model}, w_std);
      fill(p + "ln2.gain", {cfg_.d_model}, Real(1));
      fill(p + "ln2.bias", {cfg_.d_model}, Real(0));
      gauss(p + "ffn.w1", {cfg_.d_model, cfg_.d_ff}, w_std);
      fill(p + "ffn.b1", {cfg_.d_ff}, Real(0));
      gauss(p + "ffn.w2", {cfg_.d_ff, cfg_.d_model}, w_std);
      fill(p + "ffn.b2", {cfg_.d_model}, Real(0));
    }
    fill("ln_f.gain", {cfg_.d_model}, Real(1));
    fill("ln_f.bias", {cfg_.d_model}, Real(0));
    gauss("unembed", {cfg_.d_model, cfg_.vocab_size}, w_std);
  }

  // Runs the stack; returns the final hidden states [T x d_model].
  ValueId forward(ParamSessionT<Real>& ps, TapeT<Real>& tape, const ModelInputT<Real>& input,
                  std::shared_ptr<const AttentionMask> mask) const {
    const int t = input.length();
    if (t < 1) throw ContractError("empty model input");
    if (t > cfg_.max_seq_len) {
      throw CapacityError("input length " + std::to_string(t) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
    }
    if (!mask) throw ContractError("forward requires a mask");
    if (mask->size() != t) {
      throw ShapeError("mask size " + std::to_string(mask->size()) + " != input length " +
                       std::to_string(t));
    }
    for (int p : input.positions) {
      if (p < 0 || p >= cfg_.max_seq_len) {
        throw CapacityError("position id " + std::to_string(p) + " outside [0, max_seq_len)");
      }
    }

    // Assemble the [T x d] input matrix from the blocks.
    std::vector<ValueId> parts;
    int assembled = 0;
    for (const auto& b : input.blocks) {
      using Kind = typename ModelInputT<Real>::Block::Kind;
      switch (b.kind) {
        case Kind::kTokens: {
          for (int tok : b.tokens) {
            if (tok >= cfg_.vocab_size) {
              throw VocabError("token id " + std::to_string(tok) + " outside vocab of " +
                               std::to_string(cfg_.vocab_size));
            }
          }
          parts.push_back(tape.gather_rows(ps["tok_embed"], b.tokens));
          assembled += static_cast<int>(b.tokens.size());
          break;
        }
        case Kind::kConst: {
          if (b.rows.cols() != cfg_.d_model) {
            throw ShapeError("continuous element dim " + std::to_string(b.rows.cols()) +
                             " != d_model " + std::to_string(cfg_.d_model));
          }
          parts.push_back(tape.constant(b.rows));
          assembled += b.rows.rows();
          break;
        }
        case Kind::kRef: {
          const auto& v = tape.value(b.ref);
          if (v.ndim() != 2 || v.cols() != cfg_.d_model || v.dim(0) != b.ref_rows) {
            throw ShapeError("ref block shape " + v.shape_str() + " does not provide " +
                             std::to_string(b.ref_rows) + " rows of d_model");
          }
          parts.push_back(b.ref);
          assembled += b.ref_rows;
          break;
        }
      }
    }
    if (assembled != t) throw ContractError("input blocks disagree with position count");

    ValueId x = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);
    x = tape.add(x, tape.gather_rows(ps["pos_embed"], input.positions));

    const int dh = cfg_.head_dim();
    const Real inv_sqrt_dh = Real(1) / static_cast<Real>(std::sqrt(static_cast<double>(dh)));
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      ValueId a_in = tape.layer_norm(x, ps[p + "ln1.gain"], ps[p + "ln1.bias"],
                                     static_cast<Real>(cfg_.ln_eps));
      ValueId q = tape.matmul(a_in, ps[p + "attn.wq"]);
      ValueId k = tape.matmul(a_in, ps[p + "attn.wk"]);
      ValueId v = tape.matmul(a_in, ps[p + "attn.wv"]);
      std::vector<ValueId> heads;
      heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
      for (int h = 0; h < cfg_.n_heads; ++h) {
        ValueId qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
        ValueId kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
        ValueId vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
        ValueId scores = tape.scale(tape.matmul(qh, kh, false, true), inv_sqrt_dh);
        ValueId probs = tape.masked_softmax(scores, mask);
        heads.push_back(tape.matmul(probs, vh));
      }
      ValueId ctx = cfg_.n_heads == 1 ? heads[0] : tape.concat_cols(heads);
      x = tape.add(x, tape.matmul(ctx, ps[p + "attn.wo"]));
      ValueId f_in = tape.layer_norm(x, ps[p + "ln2.gain"], ps[p + "ln2.bias"],
                                     static_cast<Real>(cfg_.ln_eps));
      ValueId f1 = tape.silu(tape.add_rowvec(tape.matmul(f_in, ps[p + "ffn.w1"]), ps[p + "ffn.b1"]));
      ValueId f2 = tape.add_rowvec(tape.matmul(f1, ps[p + "ffn.w2"]), ps[p + "ffn.b2"]);
      x = tape.add(x, f2);
    }
    return tape.layer_norm(x, ps["ln_f.gain"], ps["ln_f.bias"], static_cast<Real>(cfg_.ln_eps));
  }

  // Vocabulary logits for the given hidden rows.
  ValueId logits(ParamSessionT<Real>& ps, TapeT<Real>& tape, ValueId hidden) const {
    const auto& h = tape.value(hidden);
    if (h.ndim() != 2 || h.cols() != cfg_.d_model) {
      throw ShapeError("logits input must be [n x d_model], got " + h.shape_str());
    }
    return tape.matmul(hidden, ps["unembed"]);
  }

 private:
  BackboneConfig cfg_;
};

using Backbone = BackboneT<float>;

}  // namespace rematch
