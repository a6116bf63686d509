// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "rematch/backbone.hpp"
#include "rematch/embedder.hpp"
#include "rematch/errors.hpp"
#include "test_util.hpp"

using namespace rematch;
using rtest::random_tensor;

namespace {

BackboneConfig small_config() {
  BackboneConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_ff = 24;
  cfg.vocab_size = kMinVocabSize;
  cfg.max_seq_len = 48;
  return cfg;
}

TokenSequence demo_sequence() {
  TokenSequence s;
  s.push_token(kTaskTokenBase);
  for (int i = 0; i < 5; ++i) s.push_token(kQueryBinBase + 7 * i);
  return s;
}

// Orthogonality reference: unit-normalize rows, mean of squared dot products
// over distinct pairs. Written directly from the definition.
double orth_oracle(const TensorT<double>& rows) {
  const int k = rows.dim(0), d = rows.dim(1);
  std::vector<std::vector<double>> n(k, std::vector<double>(d));
  for (int i = 0; i < k; ++i) {
    double nrm = 0.0;
    for (int c = 0; c < d; ++c) nrm += rows.at(i, c) * rows.at(i, c);
    nrm = std::sqrt(nrm);
    for (int c = 0; c < d; ++c) n[i][c] = rows.at(i, c) / nrm;
  }
  double acc = 0.0;
  int pairs = 0;
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += n[i][c] * n[j][c];
      acc += dot * dot;
      ++pairs;
    }
  }
  return acc / pairs;
}

}  // namespace

TEST_CASE("encode produces k contextual rows and a mean-fused vector", "[embedder]") {
  BackboneConfig cfg = small_config();
  Backbone bb(cfg);
  const int k = 4;
  Embedder emb(&bb, k);
  ParamStoreT<float> store;
  bb.init_params(store, 3);
  emb.init_params(store, 3);

  Tape tape;
  ParamSessionT<float> ps(tape, store);
  MultiEmbedding me = emb.encode(ps, tape, demo_sequence(), Side::kQuery, false);

  const Tensor& rows = tape.value(me.rows);
  const Tensor& fused = tape.value(me.fused);
  REQUIRE(rows.shape() == std::vector<int>{k, cfg.d_model});
  REQUIRE(fused.shape() == std::vector<int>{cfg.d_model});
  for (int c = 0; c < cfg.d_model; ++c) {
    double mean = 0.0;
    for (int r = 0; r < k; ++r) mean += static_cast<double>(rows.at(r, c));
    REQUIRE(fused[c] == Catch::Approx(mean / k).margin(1e-6));
  }

  // Rows are contextual, not copies of each other.
  bool distinct = false;
  for (int c = 0; c < cfg.d_model && !distinct; ++c) distinct = rows.at(0, c) != rows.at(1, c);
  REQUIRE(distinct);
}

TEST_CASE("query and document sides use their own learnable tokens", "[embedder]") {
  BackboneConfig cfg = small_config();
  Backbone bb(cfg);
  Embedder emb(&bb, 3);
  ParamStoreT<float> store;
  bb.init_params(store, 21);
  emb.init_params(store, 21);
  REQUIRE(store.has("embed.lq"));
  REQUIRE(store.has("embed.ld"));

  Tape tape;
  ParamSessionT<float> ps(tape, store);
  const TokenSequence s = demo_sequence();
  MultiEmbedding q = emb.encode(ps, tape, s, Side::kQuery, false);
  MultiEmbedding d = emb.encode(ps, tape, s, Side::kDocument, false);
  const Tensor& fq = tape.value(q.fused);
  const Tensor& fd = tape.value(d.fused);
  bool differs = false;
  for (int c = 0; c < cfg.d_model && !differs; ++c) differs = fq[c] != fd[c];
  REQUIRE(differs);
}

TEST_CASE("chat wrapping extends the sequence with role markers", "[embedder]") {
  BackboneConfig cfg = small_config();
  Backbone bb(cfg);
  Embedder emb(&bb, 2);
  ParamStoreT<float> store;
  bb.init_params(store, 4);
  emb.init_params(store, 4);

  Tape tape;
  ParamSessionT<float> ps(tape, store);
  const TokenSequence s = demo_sequence();
  MultiEmbedding plain = emb.encode(ps, tape, s, Side::kQuery, false);
  MultiEmbedding chat = emb.encode(ps, tape, s, Side::kQuery, true);
  const Tensor& fp = tape.value(plain.fused);
  const Tensor& fc = tape.value(chat.fused);
  bool differs = false;
  for (int c = 0; c < cfg.d_model && !differs; ++c) differs = fp[c] != fc[c];
  REQUIRE(differs);
}

TEST_CASE("encode rejects empty input and oversized input", "[embedder]") {
  BackboneConfig cfg = small_config();
  Backbone bb(cfg);
  Embedder emb(&bb, 2);
  ParamStoreT<float> store;
  bb.init_params(store, 5);
  emb.init_params(store, 5);
  Tape tape;
  ParamSessionT<float> ps(tape, store);

  TokenSequence empty;
  REQUIRE_THROWS_AS(emb.encode(ps, tape, empty, Side::kQuery, false), ContractError);

  TokenSequence longer;
  for (int i = 0; i < cfg.max_seq_len; ++i) longer.push_token(kQueryBinBase);
  REQUIRE_THROWS_AS(emb.encode(ps, tape, longer, Side::kQuery, false), CapacityError);

  REQUIRE_THROWS_AS(EmbedderT<float>(&bb, 0), ValidationError);
}

TEST_CASE("orthogonality loss closed-form anchors", "[embedder]") {
  BackboneConfig cfg = small_config();
  BackboneT<double> bb(cfg);

  TapeT<double> tape;
  auto me_of = [&](TensorT<double> rows) {
    MultiEmbedding me;
    me.k = rows.dim(0);
    me.rows = tape.leaf(std::move(rows), true);
    return me;
  };
  EmbedderT<double> emb(&bb, 2);

  // Identical rows: every pairwise cosine is 1 -> loss 1.
  auto same = me_of(TensorT<double>::from({2, 3}, {1, 2, 3, 1, 2, 3}));
  REQUIRE(tape.value(emb.orthogonality_loss(tape, same))[0] == Catch::Approx(1.0).margin(1e-12));

  // Orthogonal rows -> loss 0.
  auto orth = me_of(TensorT<double>::from({2, 3}, {1, 0, 0, 0, 5, 0}));
  REQUIRE(tape.value(emb.orthogonality_loss(tape, orth))[0] == Catch::Approx(0.0).margin(1e-15));

  // Rows at 60 degrees: squared cosine 0.25.
  const double c60 = 0.5, s60 = std::sqrt(3.0) / 2.0;
  auto deg60 = me_of(TensorT<double>::from({2, 2}, {1, 0, c60, s60}));
  REQUIRE(tape.value(emb.orthogonality_loss(tape, deg60))[0] ==
          Catch::Approx(0.25).margin(1e-12));

  // K = 1 has no pairs: constant zero.
  auto single = me_of(TensorT<double>::from({1, 3}, {1, 2, 3}));
  REQUIRE(tape.value(emb.orthogonality_loss(tape, single))[0] == 0.0);

  // Degenerate zero row refuses to normalize.
  auto degen = me_of(TensorT<double>::from({2, 2}, {0, 0, 1, 0}));
  REQUIRE_THROWS_AS(emb.orthogonality_loss(tape, degen), DegenerateVectorError);
}

TEST_CASE("orthogonality loss matches reference on random rows", "[embedder]") {
  BackboneConfig cfg = small_config();
  BackboneT<double> bb(cfg);
  EmbedderT<double> emb(&bb, 2);
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const int k = 2 + static_cast<int>(rng.next_below(6));
    const int d = 3 + static_cast<int>(rng.next_below(10));
    auto rows = random_tensor<double>({k, d}, rng);
    TapeT<double> tape;
    MultiEmbedding me;
    me.k = k;
    me.rows = tape.leaf(rows, true);
    const double got = tape.value(emb.orthogonality_loss(tape, me))[0];
    REQUIRE(got == Catch::Approx(orth_oracle(rows)).epsilon(1e-10));
  }
}

TEST_CASE("gradcheck: orthogonality loss", "[embedder][gradcheck]") {
  BackboneConfig cfg = small_config();
  BackboneT<double> bb(cfg);
  EmbedderT<double> emb(&bb, 2);
  Rng rng(32);
  auto rows = random_tensor<double>({4, 6}, rng);
  rtest::check_gradients<double>({rows}, [&](TapeT<double>& t, const std::vector<ValueId>& l) {
    MultiEmbedding me;
    me.k = 4;
    me.rows = l[0];
    return emb.orthogonality_loss(t, me);
  });
}

TEST_CASE("learnable tokens receive gradient through encode and fuse", "[embedder]") {
  BackboneConfig cfg = small_config();
  BackboneT<double> bb(cfg);
  EmbedderT<double> emb(&bb, 3);
  ParamStoreT<double> store;
  bb.init_params(store, 8);
  emb.init_params(store, 8);

  TapeT<double> tape;
  ParamSessionT<double> ps(tape, store);
  MultiEmbedding me = emb.encode(ps, tape, demo_sequence(), Side::kQuery, false);
  ValueId loss = tape.add(tape.mean_all(me.fused), emb.orthogonality_loss(tape, me));
  tape.backward(loss);

  GradientSetT<double> grads = ps.collect();
  REQUIRE(grads.has("embed.lq"));
  REQUIRE_FALSE(grads.has("embed.ld"));  // document tokens untouched
  REQUIRE(grads.has("tok_embed"));
  REQUIRE(grads.at("embed.lq").l2_norm() > 0.0);
}

TEST_CASE("gradcheck: learnable tokens through the full encode path", "[embedder][gradcheck]") {
  BackboneConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 12;
  cfg.vocab_size = kMinVocabSize;
  cfg.max_seq_len = 24;
  BackboneT<double> bb(cfg);
  EmbedderT<double> emb(&bb, 2);
  ParamStoreT<double> store;
  bb.init_params(store, 14);
  emb.init_params(store, 14);

  TapeT<double> tape;
  ParamSessionT<double> ps(tape, store);
  MultiEmbedding me = emb.encode(ps, tape, demo_sequence(), Side::kQuery, true);
  Rng wrng(2);
  auto w = tape.constant(random_tensor<double>({cfg.d_model}, wrng));
  ValueId loss = tape.add(
      tape.scale(tape.mean_all(tape.mul(me.fused, w)), static_cast<double>(cfg.d_model)),
      emb.orthogonality_loss(tape, me));
  tape.backward(loss);

  ValueId lq = ps["embed.lq"];
  const TensorT<double> base = tape.value(lq);
  const TensorT<double> analytic = tape.grad(lq);
  Rng probe(77);
  for (int i = 0; i < 8; ++i) {
    const std::int64_t ix =
        static_cast<std::int64_t>(probe.next_below(static_cast<std::uint64_t>(base.numel())));
    TensorT<double> p = base;
    const double h = 1e-4;  // low-width layer norm curvature; fine in 64-bit
    p[ix] = base[ix] + h;
    tape.set_leaf_value(lq, p);
    tape.replay();
    const double fp = tape.value(loss)[0];
    p[ix] = base[ix] - h;
    tape.set_leaf_value(lq, p);
    tape.replay();
    const double fm = tape.value(loss)[0];
    tape.set_leaf_value(lq, base);
    const double fd = (fp - fm) / (2 * h);
    REQUIRE(std::abs(fd - analytic[ix]) <=
            1e-9 + 1e-4 * std::max(std::abs(fd), std::abs(analytic[ix])));
  }
}
