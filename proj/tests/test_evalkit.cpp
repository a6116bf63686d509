// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation tooling: retrieval ranking against an exhaustive oracle, the
// row-diversity probe against the training-time penalty, mask dumps, CSV
// exports, config fingerprints, and the finite-difference gradient audit.

#include <catch2/catch_amalgamated.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "rematch/backbone.hpp"
#include "rematch/binio.hpp"
#include "rematch/embedder.hpp"
#include "rematch/evalkit.hpp"
#include "rematch/matcher.hpp"
#include "rematch/synth.hpp"
#include "support.hpp"

using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::MessageMatches;
using namespace rematch;
using rematch_test::TempDir;

namespace {

TrainConfig tiny_train(MatchingMode mode, int k) {
  TrainConfig c;
  c.backbone.n_layers = 1;
  c.backbone.d_model = 8;
  c.backbone.n_heads = 2;
  c.backbone.d_ff = 16;
  c.backbone.vocab_size = kMinVocabSize;
  c.backbone.max_seq_len = 96;
  c.backbone.ln_eps = 1e-5f;
  c.k_tokens = k;
  c.matching_mode = mode;
  c.temperature = 0.05f;
  c.w_orth = 0.5f;
  c.w_qdm = 0.1f;
  c.steps = 10;
  c.batch_size = 2;
  c.lr_peak = 1e-3f;
  c.warmup_frac = 0.0f;
  c.seed = 3;
  c.n_threads = 1;
  return c;
}

TaskConfig tiny_task() {
  TaskConfig t;
  t.d_latent = 4;
  t.text_len = 3;
  t.n_patches = 2;
  t.patch_dim = 8;
  t.noise_std = 0.05f;
  t.hard_negative_angle = 0.35f;
  t.seed = 5;
  return t;
}

// Exhaustive long-double re-derivation of the 1-based rank with the same
// lowest-index tie rule.
int oracle_rank(const std::vector<float>& q, const std::vector<std::vector<float>>& pool,
                int rel) {
  auto cos_ld = [](const std::vector<float>& a, const std::vector<float>& b) {
    long double dot = 0.0L, na = 0.0L, nb = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += static_cast<long double>(a[i]) * b[i];
      na += static_cast<long double>(a[i]) * a[i];
      nb += static_cast<long double>(b[i]) * b[i];
    }
    return dot / std::sqrt(na * nb);
  };
  const long double rs = cos_ld(q, pool[static_cast<std::size_t>(rel)]);
  int rank = 1;
  for (int j = 0; j < static_cast<int>(pool.size()); ++j) {
    if (j == rel) continue;
    const long double s = cos_ld(q, pool[static_cast<std::size_t>(j)]);
    if (s > rs || (s == rs && j < rel)) ++rank;
  }
  return rank;
}

std::vector<float> random_vec(Rng& rng, int d) {
  std::vector<float> v(static_cast<std::size_t>(d));
  for (auto& x : v) x = static_cast<float>(rng.next_gaussian());
  return v;
}

}  // namespace

TEST_CASE("retrieval rank matches an exhaustive oracle, ties included", "[evalkit]") {
  Rng rng = Rng::keyed(17, "rank", {});
  for (int trial = 0; trial < 40; ++trial) {
    const std::vector<float> q = random_vec(rng, 6);
    std::vector<std::vector<float>> pool;
    for (int j = 0; j < 7; ++j) pool.push_back(random_vec(rng, 6));
    const int rel = trial % 7;
    REQUIRE(relevant_rank(q, pool, rel) == oracle_rank(q, pool, rel));
  }

  // Exact tie: an identical document earlier in the pool outranks the
  // relevant one; a later identical document does not.
  std::vector<float> q = {1.0f, 0.5f, -0.25f};
  std::vector<std::vector<float>> pool = {{0.3f, 1.0f, 0.0f},
                                          {0.9f, 0.4f, -0.2f},
                                          {-1.0f, 0.2f, 0.8f},
                                          {0.9f, 0.4f, -0.2f}};
  REQUIRE(relevant_rank(q, pool, 3) == relevant_rank(q, pool, 1) + 1);
  // A scaled copy has the same cosine: still an exact tie.
  pool[3] = {1.8f, 0.8f, -0.4f};
  REQUIRE(relevant_rank(q, pool, 3) == relevant_rank(q, pool, 1) + 1);

  REQUIRE_THROWS_AS(relevant_rank(q, {}, 0), ContractError);
  REQUIRE_THROWS_AS(relevant_rank(q, pool, 4), ContractError);
  REQUIRE_THROWS_AS(relevant_rank(q, pool, -1), ContractError);
}

TEST_CASE("evaluate scores a perfect embedder at one and a blind one at chance",
          "[evalkit]") {
  std::vector<EvalQuery> queries;
  for (int i = 0; i < 10; ++i) {
    EvalQuery q;
    q.query.push_token(kTaskTokenBase + (i % 5));
    for (int j = 0; j < 5; ++j) {
      TokenSequence d;
      d.push_token(kTaskTokenBase + j);
      q.pool.push_back(std::move(d));
    }
    q.relevant_index = i % 5;
    queries.push_back(std::move(q));
  }

  const EmbedFn onehot = [](const TokenSequence& seq, Side) {
    std::vector<float> v(8, 0.0f);
    v[static_cast<std::size_t>(seq.elements.front().token % 8)] = 1.0f;
    return v;
  };
  EvalReport perfect = evaluate(onehot, queries);
  REQUIRE(perfect.n_queries == 10);
  REQUIRE(perfect.pool_size == 5);
  REQUIRE(perfect.hit_at_1 == 1.0);
  REQUIRE(perfect.recall_at.at(1) == 1.0);
  REQUIRE(perfect.recall_at.at(5) == 1.0);

  // A constant embedder ties everything; the tie rule hands rank r+1 to the
  // document at pool index r, so only relevant_index == 0 scores a hit.
  const EmbedFn blind = [](const TokenSequence&, Side) {
    return std::vector<float>{1.0f, 1.0f};
  };
  EvalReport chance = evaluate(blind, queries);
  REQUIRE(chance.hit_at_1 == Approx(1.0 / 5).margin(1e-12));
  REQUIRE(chance.recall_at.at(1) <= chance.recall_at.at(5));
  REQUIRE(chance.recall_at.at(5) == 1.0);
  REQUIRE(chance.recall_at.at(1) == chance.hit_at_1);

  REQUIRE_THROWS_AS(evaluate(onehot, {}), ContractError);
}

TEST_CASE("a fresh model evaluates deterministically end to end", "[evalkit]") {
  TrainConfig cfg = tiny_train(MatchingMode::kOff, 1);
  Model model(cfg);
  model.init_params();
  const std::vector<EvalQuery> queries = gen_eval_pool(tiny_task(), 3, 4, 0.5f);

  EvalReport a = evaluate(model_embed_fn(model), queries);
  EvalReport b = evaluate(model_embed_fn(model), queries);
  REQUIRE(a.hit_at_1 == b.hit_at_1);
  REQUIRE(a.recall_at == b.recall_at);
  REQUIRE(a.pool_size == 4);
  REQUIRE(a.hit_at_1 >= 0.0);
  REQUIRE(a.hit_at_1 <= 1.0);
}

TEST_CASE("the row-diversity probe agrees with the training-time penalty", "[evalkit]") {
  // Anchors: identical rows 1, orthogonal rows 0, a 60-degree pair 0.25.
  REQUIRE(mean_offdiag_sq_cosine(TensorT<float>::from({2, 2}, {1, 0, 1, 0})) ==
          Approx(1.0).margin(1e-7));
  REQUIRE(mean_offdiag_sq_cosine(TensorT<float>::from({2, 2}, {1, 0, 0, 1})) ==
          Approx(0.0).margin(1e-12));
  REQUIRE(mean_offdiag_sq_cosine(
              TensorT<float>::from({2, 2}, {1.0f, 0.0f, 0.5f, 0.8660254f})) ==
          Approx(0.25).margin(1e-6));
  REQUIRE(mean_offdiag_sq_cosine(TensorT<float>::from({1, 3}, {1, 2, 3})) == 0.0);
  REQUIRE_THROWS_AS(mean_offdiag_sq_cosine(TensorT<float>::from({2, 2}, {1, 0, 0, 0})),
                    DegenerateVectorError);

  // Random rows: the probe equals the tape-side orthogonality loss.
  Rng rng = Rng::keyed(23, "probe", {});
  TensorT<float> rows({3, 6});
  for (std::int64_t i = 0; i < rows.numel(); ++i) {
    rows[i] = static_cast<float>(rng.next_gaussian());
  }
  BackboneConfig bc = tiny_train(MatchingMode::kOff, 3).backbone;
  BackboneT<float> backbone(bc);
  EmbedderT<float> embedder(&backbone, 3);
  TapeT<float> tape;
  MultiEmbedding me;
  me.rows = tape.leaf(rows, false);
  me.fused = me.rows;  // unused by the penalty
  me.k = 3;
  const double penalty =
      static_cast<double>(tape.value(embedder.orthogonality_loss(tape, me))[0]);
  REQUIRE(mean_offdiag_sq_cosine(rows) == Approx(penalty).margin(1e-6));
}

TEST_CASE("mask PGM files round trip and the reader is strict", "[evalkit]") {
  TempDir tmp;
  const std::string path = tmp.path("mask.pgm");

  Rng rng = Rng::keyed(31, "mask", {});
  AttentionMask mask(9);
  for (int i = 0; i < 9; ++i) {
    for (int j = 0; j < 9; ++j) mask.set(i, j, rng.next_bool());
  }
  dump_mask_pgm(mask, path);
  const AttentionMask back = read_mask_pgm(path);
  REQUIRE(back.size() == 9);
  for (int i = 0; i < 9; ++i) {
    for (int j = 0; j < 9; ++j) REQUIRE(back.allow(i, j) == mask.allow(i, j));
  }
  REQUIRE(binio::read_file(path).rfind("P5\n9 9\n255\n", 0) == 0);

  SECTION("wrong format tag") {
    binio::write_file(path, "P2\n2 2\n255\n....");
    REQUIRE_THROWS_AS(read_mask_pgm(path), CorruptHeaderError);
  }
  SECTION("non-square") {
    binio::write_file(path, std::string("P5\n2 3\n255\n") + std::string(6, '\0'));
    REQUIRE_THROWS_MATCHES(read_mask_pgm(path), CorruptHeaderError,
                           MessageMatches(ContainsSubstring("square")));
  }
  SECTION("wrong maxval") {
    binio::write_file(path, std::string("P5\n2 2\n254\n") + std::string(4, '\0'));
    REQUIRE_THROWS_MATCHES(read_mask_pgm(path), CorruptHeaderError,
                           MessageMatches(ContainsSubstring("maxval")));
  }
  SECTION("gray pixel") {
    std::string body(4, '\0');
    body[2] = 0x7f;
    binio::write_file(path, "P5\n2 2\n255\n" + body);
    REQUIRE_THROWS_MATCHES(read_mask_pgm(path), CorruptHeaderError,
                           MessageMatches(ContainsSubstring("0 or 255")));
  }
  SECTION("short payload") {
    binio::write_file(path, std::string("P5\n2 2\n255\n") + std::string(3, '\0'));
    REQUIRE_THROWS_AS(read_mask_pgm(path), TruncatedFileError);
  }
}

TEST_CASE("match mask dumps cover every segment and pass the structural audit",
          "[evalkit]") {
  TempDir tmp;
  SynthTask st(tiny_task());
  const TrainingInstance inst = st.instance(0);

  struct Expect {
    MatchingMode mode;
    std::vector<std::string> segments;
  };
  const std::vector<Expect> table = {
      {MatchingMode::kFull,
       {"prompt", "query_raw", "query_feat", "doc1_raw", "doc1_feat", "doc2_raw", "doc2_feat",
        "answer0", "answer1", "answer2", "answer3", "answer4", "answer5", "answer6",
        "answer7"}},
      {MatchingMode::kFeatOnly,
       {"prompt", "query_feat", "doc1_feat", "doc2_feat", "answer0", "answer1"}},
  };

  for (const auto& expect : table) {
    const MatchLayout layout =
        plan_match_layout(inst.query, inst.positive, inst.hard_negative, expect.mode, true);
    const std::string prefix = tmp.path(matching_mode_name(expect.mode));
    dump_match_mask(layout, prefix);

    const AttentionMask mask = read_mask_pgm(prefix + ".pgm");
    REQUIRE(mask.size() == layout.length());
    REQUIRE(audit_unified_mask(layout, mask).empty());

    const nlohmann::json side = nlohmann::json::parse(binio::read_file(prefix + ".json"));
    REQUIRE(side.at("size").get<int>() == layout.length());
    REQUIRE(side.at("mode").get<std::string>() == matching_mode_name(expect.mode));
    REQUIRE(side.at("positive_in_slot1").get<bool>() == true);
    REQUIRE(side.at("answers").get<int>() == layout.answers());

    const auto& spans = side.at("spans");
    REQUIRE(spans.size() == expect.segments.size());
    int cursor = 0;
    for (std::size_t s = 0; s < spans.size(); ++s) {
      REQUIRE(spans[s].at("segment").get<std::string>() == expect.segments[s]);
      REQUIRE(spans[s].at("first").get<int>() == cursor);
      REQUIRE(spans[s].at("last").get<int>() >= cursor);
      cursor = spans[s].at("last").get<int>() + 1;
    }
    REQUIRE(cursor == layout.length());
  }
}

TEST_CASE("metrics CSV rows reparse to the recorded values", "[evalkit]") {
  TempDir tmp;
  REQUIRE(metrics_csv_header() == "step,lr,loss_total,loss_cl,loss_orth,loss_qdm,grad_norm");

  StepMetrics m;
  m.step = 3;
  m.lr = 1.0 / 3.0;
  m.loss_total = 1.23456789e-4;
  m.loss_cl = 2.5;
  m.loss_orth = 0.125;
  m.loss_qdm = 9.87654321;
  m.grad_norm = 1e-12;

  const std::string row = metrics_csv_row(m);
  int step = -1;
  double lr = 0, lt = 0, lc = 0, lo = 0, lq = 0, gn = 0;
  REQUIRE(std::sscanf(row.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf", &step, &lr, &lt, &lc, &lo,
                      &lq, &gn) == 7);
  REQUIRE(step == 3);
  REQUIRE(lr == Approx(m.lr).epsilon(1e-8));
  REQUIRE(lt == Approx(m.loss_total).epsilon(1e-8));
  REQUIRE(lc == 2.5);
  REQUIRE(lo == 0.125);
  REQUIRE(lq == Approx(m.loss_qdm).epsilon(1e-8));
  REQUIRE(gn == Approx(m.grad_norm).epsilon(1e-8));

  const std::string path = tmp.path("metrics.csv");
  {
    MetricsWriter w(path);
    w.write(m);
    StepMetrics m2 = m;
    m2.step = 4;
    w.write(m2);
  }
  {
    MetricsWriter w(path, /*append=*/true);  // resume: no second header
    StepMetrics m3 = m;
    m3.step = 5;
    w.write(m3);
  }
  const std::string text = binio::read_file(path);
  REQUIRE(text == metrics_csv_header() + "\n" + row + "\n" +
                      metrics_csv_row([&] {
                        StepMetrics x = m;
                        x.step = 4;
                        return x;
                      }()) +
                      "\n" + metrics_csv_row([&] {
                        StepMetrics x = m;
                        x.step = 5;
                        return x;
                      }()) +
                      "\n");

  // Appending to a file that does not exist yet still writes the header.
  const std::string fresh = tmp.path("fresh.csv");
  MetricsWriter w2(fresh, /*append=*/true);
  REQUIRE(binio::read_file(fresh) == metrics_csv_header() + "\n");

  const std::string exported = tmp.path("exported.csv");
  export_metrics_csv({m}, exported);
  REQUIRE(binio::read_file(exported) == metrics_csv_header() + "\n" + row + "\n");
}

TEST_CASE("embedding export writes one labeled row per query and document", "[evalkit]") {
  TempDir tmp;
  EvalDataset ds;
  ds.task = tiny_task();
  ds.hard_fraction = 0.5f;
  SynthTask st(ds.task);
  for (int i = 0; i < 2; ++i) ds.queries.push_back(st.eval_query(static_cast<std::uint64_t>(i), 3, 0.5f));

  const EmbedFn stub = [](const TokenSequence& seq, Side side) {
    float acc = side == Side::kQuery ? 0.25f : -0.25f;
    for (const auto& e : seq.elements) acc += e.is_vec() ? e.vec[0] : static_cast<float>(e.token);
    return std::vector<float>{acc, 2.0f * acc, -acc, 0.5f};
  };

  const std::string path = tmp.path("emb.csv");
  export_embeddings(stub, ds, path);
  const std::string text = binio::read_file(path);

  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t nl = text.find('\n', start);
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  REQUIRE(lines.size() == 1 + 2 * (1 + 3));
  REQUIRE(lines[0] == "id,side,e0,e1,e2,e3");
  REQUIRE(lines[1].rfind("q0,query,", 0) == 0);
  REQUIRE(lines[2].rfind("d0_0,document,", 0) == 0);
  REQUIRE(lines[4].rfind("d0_2,document,", 0) == 0);
  REQUIRE(lines[5].rfind("q1,query,", 0) == 0);

  // Reparse the first query row and compare with a fresh embedding call.
  const std::vector<float> want = stub(ds.queries[0].query, Side::kQuery);
  float e0 = 0, e1 = 0, e2 = 0, e3 = 0;
  REQUIRE(std::sscanf(lines[1].c_str(), "q0,query,%f,%f,%f,%f", &e0, &e1, &e2, &e3) == 4);
  REQUIRE(e0 == Approx(want[0]).epsilon(1e-6));
  REQUIRE(e3 == Approx(want[3]).epsilon(1e-6));
}

TEST_CASE("configuration fingerprints react to any field change", "[evalkit]") {
  const nlohmann::json a{{"x", 1}, {"y", {{"z", 2}}}};
  const std::string fa = fingerprint_json(a);
  REQUIRE(fa.size() == 16);
  for (char c : fa) REQUIRE(std::isxdigit(static_cast<unsigned char>(c)) != 0);
  REQUIRE(fingerprint_json(nlohmann::json(a)) == fa);

  nlohmann::json b = a;
  b["x"] = 2;
  REQUIRE(fingerprint_json(b) != fa);
  nlohmann::json c = a;
  c["y"]["z"] = 3;
  REQUIRE(fingerprint_json(c) != fa);

  const TrainConfig cfg = tiny_train(MatchingMode::kFull, 2);
  TrainConfig cfg2 = cfg;
  cfg2.seed = cfg.seed + 1;
  REQUIRE(fingerprint_json(train_config_to_json(cfg)) !=
          fingerprint_json(train_config_to_json(cfg2)));
}

TEST_CASE("the gradient audit passes honestly and catches tampering", "[evalkit]") {
  const TrainConfig cfg = tiny_train(MatchingMode::kFull, 2);
  GradcheckOptions opts;
  opts.probes_per_component = 12;

  const GradcheckReport honest = gradcheck_suite(cfg, 3, opts);
  REQUIRE(honest.components.size() == 4);
  const std::vector<std::string> names = {"L_cl", "L_orth", "L_qdm", "L_total"};
  for (std::size_t i = 0; i < names.size(); ++i) {
    INFO(names[i] << " max scaled err " << honest.components[i].max_scaled_err);
    REQUIRE(honest.components[i].name == names[i]);
    REQUIRE(honest.components[i].checks == 12);
    REQUIRE(honest.components[i].pass);
  }
  REQUIRE(honest.all_pass());
  REQUIRE(honest.to_json().at("all_pass").get<bool>());

  // Determinism: identical seeds reproduce identical error statistics.
  const GradcheckReport again = gradcheck_suite(cfg, 3, opts);
  for (std::size_t i = 0; i < honest.components.size(); ++i) {
    REQUIRE(again.components[i].max_scaled_err == honest.components[i].max_scaled_err);
  }

  // Negative control: corrupting one component's analytic gradients must be
  // caught in that component and only there.
  GradcheckOptions tampered = opts;
  tampered.tamper_component = "L_cl";
  const GradcheckReport caught = gradcheck_suite(cfg, 3, tampered);
  REQUIRE(!caught.all_pass());
  for (const auto& comp : caught.components) {
    REQUIRE(comp.pass == (comp.name != "L_cl"));
  }

  // Matching off: no matcher component, and the audit still passes.
  TrainConfig off = cfg;
  off.matching_mode = MatchingMode::kOff;
  GradcheckOptions light = opts;
  light.probes_per_component = 6;
  const GradcheckReport r3 = gradcheck_suite(off, 3, light);
  REQUIRE(r3.components.size() == 3);
  REQUIRE(r3.components[0].name == "L_cl");
  REQUIRE(r3.components[1].name == "L_orth");
  REQUIRE(r3.components[2].name == "L_total");
  REQUIRE(r3.all_pass());
}
