// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rematch/binio.hpp"
#include "rematch/contrastive.hpp"
#include "rematch/dataset.hpp"
#include "rematch/errors.hpp"
#include "rematch/mask.hpp"
#include "rematch/matcher.hpp"
#include "rematch/rng.hpp"
#include "rematch/trainer.hpp"

namespace rematch {

// 64-bit FNV-1a over a canonical JSON dump; identifies a resolved
// configuration across artifacts (checkpoints, reports, manifests).
inline std::string fingerprint_json(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Retrieval evaluation

struct EvalReport {
  int n_queries = 0;
  int pool_size = 0;
  double hit_at_1 = 0.0;
  std::map<int, double> recall_at;
  std::string config_fingerprint;

  nlohmann::json to_json() const {
    nlohmann::json rk = nlohmann::json::object();
    for (const auto& [k, v] : recall_at) rk[std::to_string(k)] = v;
    return nlohmann::json{{"n_queries", n_queries},
                          {"pool_size", pool_size},
                          {"hit_at_1", hit_at_1},
                          {"recall_at", std::move(rk)},
                          {"config_fingerprint", config_fingerprint}};
  }
};

// Embeds one sequence for one side; must be a pure function of its inputs.
using EmbedFn = std::function<std::vector<float>(const TokenSequence&, Side)>;

inline EmbedFn model_embed_fn(const Model& model) {
  return [&model](const TokenSequence& seq, Side side) {
    const TensorT<float> t = model.embed_fused(seq, side);
    return std::vector<float>(t.data(), t.data() + t.numel());
  };
}

// 1-based rank of the relevant document under cosine similarity with the
// lowest-index tie rule (a tie counts as ahead only for lower indices).
inline int relevant_rank(const std::vector<float>& query,
                         const std::vector<std::vector<float>>& pool, int relevant) {
  if (pool.empty()) throw ContractError("relevant_rank needs a non-empty pool");
  if (relevant < 0 || relevant >= static_cast<int>(pool.size())) {
    throw ContractError("relevant index outside pool");
  }
  const double rel_sim = cosine_sim(query, pool[static_cast<std::size_t>(relevant)]);
  int rank = 1;
  for (int j = 0; j < static_cast<int>(pool.size()); ++j) {
    if (j == relevant) continue;
    const double s = cosine_sim(query, pool[static_cast<std::size_t>(j)]);
    if (s > rel_sim || (s == rel_sim && j < relevant)) ++rank;
  }
  return rank;
}

inline EvalReport evaluate(const EmbedFn& embed, const std::vector<EvalQuery>& queries,
                           const std::vector<int>& recall_ks = {1, 5, 10}) {
  if (queries.empty()) throw ContractError("evaluate needs at least one query");
  EvalReport report;
  report.n_queries = static_cast<int>(queries.size());
  report.pool_size = static_cast<int>(queries.front().pool.size());
  std::map<int, int> recall_hits;
  for (int k : recall_ks) recall_hits[k] = 0;
  int top1 = 0;
  for (const auto& q : queries) {
    if (q.pool.empty()) throw ContractError("evaluate: query with empty pool");
    const std::vector<float> qe = embed(q.query, Side::kQuery);
    std::vector<std::vector<float>> pe;
    pe.reserve(q.pool.size());
    for (const auto& d : q.pool) pe.push_back(embed(d, Side::kDocument));
    const int rank = relevant_rank(qe, pe, q.relevant_index);
    if (rank == 1) ++top1;
    for (auto& [k, hits] : recall_hits) {
      if (rank <= k) ++hits;
    }
  }
  report.hit_at_1 = static_cast<double>(top1) / report.n_queries;
  for (const auto& [k, hits] : recall_hits) {
    report.recall_at[k] = static_cast<double>(hits) / report.n_queries;
  }
  return report;
}

// Mean squared cosine over distinct row pairs, computed directly in 64-bit.
// This is the post-hoc probe of multi-embedding diversity (the training-time
// penalty is the tape-side orthogonality loss).
inline double mean_offdiag_sq_cosine(const TensorT<float>& rows) {
  const int k = rows.dim(0);
  if (k < 2) return 0.0;
  const int d = rows.dim(1);
  double total = 0.0;
  int pairs = 0;
  for (int a = 0; a < k; ++a) {
    for (int b = a + 1; b < k; ++b) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int c = 0; c < d; ++c) {
        const double xa = rows.at(a, c);
        const double xb = rows.at(b, c);
        dot += xa * xb;
        na += xa * xa;
        nb += xb * xb;
      }
      if (na == 0.0 || nb == 0.0) {
        throw DegenerateVectorError("zero-norm multi-embedding row");
      }
      const double cosab = dot / std::sqrt(na * nb);
      total += cosab * cosab;
      ++pairs;
    }
  }
  return total / pairs;
}

// ---------------------------------------------------------------------------
// Mask dumps (binary PGM plus a JSON sidecar naming the segment spans)

inline void dump_mask_pgm(const AttentionMask& mask, const std::string& path) {
  const int t = mask.size();
  std::string out = "P5\n" + std::to_string(t) + " " + std::to_string(t) + "\n255\n";
  out.reserve(out.size() + static_cast<std::size_t>(t) * static_cast<std::size_t>(t));
  for (int i = 0; i < t; ++i) {
    for (int j = 0; j < t; ++j) {
      out.push_back(mask.allow(i, j) ? static_cast<char>(0xff) : static_cast<char>(0x00));
    }
  }
  binio::write_file(path, out);
}

inline AttentionMask read_mask_pgm(const std::string& path) {
  const std::string buf = binio::read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size() && (buf[pos] == ' ' || buf[pos] == '\n' || buf[pos] == '\t')) ++pos;
    const std::size_t start = pos;
    while (pos < buf.size() && buf[pos] != ' ' && buf[pos] != '\n' && buf[pos] != '\t') ++pos;
    if (start == pos) throw CorruptHeaderError(path + ": truncated PGM header");
    return buf.substr(start, pos - start);
  };
  if (token() != "P5") throw CorruptHeaderError(path + ": not a binary PGM");
  const int w = std::stoi(token());
  const int h = std::stoi(token());
  const int maxval = std::stoi(token());
  if (w != h || w <= 0) throw CorruptHeaderError(path + ": mask PGM must be square");
  if (maxval != 255) throw CorruptHeaderError(path + ": mask PGM must use maxval 255");
  ++pos;  // single whitespace byte after maxval
  if (pos + static_cast<std::size_t>(w) * h > buf.size()) {
    throw TruncatedFileError(path + ": PGM payload shorter than declared");
  }
  AttentionMask mask(w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      const unsigned char c = static_cast<unsigned char>(buf[pos++]);
      if (c != 0x00 && c != 0xff) {
        throw CorruptHeaderError(path + ": mask PGM pixels must be 0 or 255");
      }
      mask.set(i, j, c == 0xff);
    }
  }
  return mask;
}

inline std::string match_segment_name(int segment) {
  switch (segment) {
    case kSegPrompt: return "prompt";
    case kSegQueryRaw: return "query_raw";
    case kSegQueryFeat: return "query_feat";
    case kSegDoc1Raw: return "doc1_raw";
    case kSegDoc1Feat: return "doc1_feat";
    case kSegDoc2Raw: return "doc2_raw";
    case kSegDoc2Feat: return "doc2_feat";
    default:
      if (segment >= kSegAnswerBase) {
        return "answer" + std::to_string(segment - kSegAnswerBase);
      }
      throw ContractError("unknown match segment " + std::to_string(segment));
  }
}

// Writes <prefix>.pgm (the unified mask) and <prefix>.json (segment spans).
inline void dump_match_mask(const MatchLayout& layout, const std::string& prefix) {
  const AttentionMask mask = build_unified_mask(layout);
  dump_mask_pgm(mask, prefix + ".pgm");

  nlohmann::json spans = nlohmann::json::array();
  int i = 0;
  while (i < layout.length()) {
    const int seg = layout.segment_of(i);
    int j = i;
    while (j + 1 < layout.length() && layout.segment_of(j + 1) == seg) ++j;
    spans.push_back({{"segment", match_segment_name(seg)}, {"first", i}, {"last", j}});
    i = j + 1;
  }
  nlohmann::json sidecar{{"size", layout.length()},
                         {"mode", matching_mode_name(layout.mode)},
                         {"positive_in_slot1", layout.positive_in_slot1},
                         {"answers", layout.answers()},
                         {"spans", std::move(spans)}};
  binio::write_file(prefix + ".json", sidecar.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// CSV exports (9 significant digits; reparsing reproduces the values)

inline std::string metrics_csv_header() {
  return "step,lr,loss_total,loss_cl,loss_orth,loss_qdm,grad_norm";
}

inline std::string metrics_csv_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", m.step, m.lr,
                m.loss_total, m.loss_cl, m.loss_orth, m.loss_qdm, m.grad_norm);
  return std::string(buf);
}

// Append-only metrics sink. Writes the header only when starting fresh.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path, bool append = false) : path_(path) {
    std::ofstream out(path, append ? (std::ios::app | std::ios::ate) : std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    if (!append || out.tellp() == std::streampos(0)) {
      out << metrics_csv_header() << "\n";
    }
    if (!out) throw IoError("write failure on " + path);
  }

  void write(const StepMetrics& m) {
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot open " + path_ + " for appending");
    out << metrics_csv_row(m) << "\n";
    if (!out) throw IoError("write failure on " + path_);
  }

 private:
  std::string path_;
};

inline void export_metrics_csv(const std::vector<StepMetrics>& history,
                               const std::string& path) {
  std::string out = metrics_csv_header() + "\n";
  for (const auto& m : history) out += metrics_csv_row(m) + "\n";
  binio::write_file(path, out);
}

// One row per fused embedding of an evaluation set: the query of each item
// and every pool document, identified as q<i> / d<i>_<j>.
inline void export_embeddings(const EmbedFn& embed, const EvalDataset& ds,
                              const std::string& path) {
  std::string out = "id,side";
  int d_model = -1;
  auto write_row = [&](const std::string& id, const char* side, const std::vector<float>& v) {
    if (d_model < 0) {
      d_model = static_cast<int>(v.size());
      for (int c = 0; c < d_model; ++c) out += ",e" + std::to_string(c);
      out += "\n";
    }
    out += id;
    out += ",";
    out += side;
    char buf[32];
    for (float x : v) {
      std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(x));
      out += buf;
    }
    out += "\n";
  };
  for (std::size_t i = 0; i < ds.queries.size(); ++i) {
    const auto& q = ds.queries[i];
    write_row("q" + std::to_string(i), "query", embed(q.query, Side::kQuery));
    for (std::size_t j = 0; j < q.pool.size(); ++j) {
      write_row("d" + std::to_string(i) + "_" + std::to_string(j), "document",
                embed(q.pool[j], Side::kDocument));
    }
  }
  binio::write_file(path, out);
}

// ---------------------------------------------------------------------------
// Gradient checking as a product feature: finite differences through every
// loss component of a tiny 64-bit model. The tamper hook scales the analytic
// gradients of one component so operators can watch the suite catch it.

struct GradcheckOptions {
  int probes_per_component = 24;
  double rtol = 1e-4;
  double atol = 1e-8;
  double fd_step = 1e-4;
  std::string tamper_component;  // empty = honest run
};

struct GradcheckComponent {
  std::string name;
  int checks = 0;
  double max_scaled_err = 0.0;  // |fd - analytic| / (atol/rtol + max(|fd|, |analytic|))
  bool pass = true;
  std::vector<std::string> probed_params;  // unique names, in first-probe order
};

struct GradcheckReport {
  std::vector<GradcheckComponent> components;

  bool all_pass() const {
    for (const auto& c : components) {
      if (!c.pass) return false;
    }
    return true;
  }

  nlohmann::json to_json() const {
    nlohmann::json comps = nlohmann::json::array();
    for (const auto& c : components) {
      comps.push_back({{"name", c.name},
                       {"checks", c.checks},
                       {"max_scaled_err", c.max_scaled_err},
                       {"pass", c.pass},
                       {"probed_params", c.probed_params}});
    }
    return nlohmann::json{{"components", std::move(comps)}, {"all_pass", all_pass()}};
  }
};

inline GradcheckReport gradcheck_suite(const TrainConfig& cfg_in, std::uint64_t seed,
                                       const GradcheckOptions& opts = {}) {
  TrainConfig cfg = cfg_in;
  cfg.seed = seed;
  cfg.validate();

  ModelT<double> model(cfg);
  model.init_params();

  TaskConfig task;
  task.d_latent = 6;
  task.text_len = 4;
  task.n_patches = 2;
  task.patch_dim = cfg.backbone.d_model;
  task.seed = seed;
  SynthTask gen(task);

  // One tape carries every component so a single replay refreshes them all.
  TapeT<double> tape;
  ParamSessionT<double> ps(tape, model.store);
  const int batch = 2;
  std::vector<InstanceEmbeddings> embs;
  std::vector<ValueId> orth_terms, qdm_terms;
  for (int i = 0; i < batch; ++i) {
    TrainingInstance inst = gen.instance(static_cast<std::uint64_t>(i));
    MultiEmbedding eq =
        model.embedder.encode(ps, tape, inst.query, Side::kQuery, cfg.chat_wrap);
    MultiEmbedding ep =
        model.embedder.encode(ps, tape, inst.positive, Side::kDocument, cfg.chat_wrap);
    MultiEmbedding en =
        model.embedder.encode(ps, tape, inst.hard_negative, Side::kDocument, cfg.chat_wrap);
    embs.push_back(InstanceEmbeddings{eq.fused, ep.fused, en.fused});
    orth_terms.push_back(model.embedder.orthogonality_loss(tape, eq));
    orth_terms.push_back(model.embedder.orthogonality_loss(tape, ep));
    orth_terms.push_back(model.embedder.orthogonality_loss(tape, en));
    if (cfg.matching_mode != MatchingMode::kOff) {
      const bool slot1 = (i % 2) == 0;
      ValueId fq = model.projector.project(ps, tape, eq.fused);
      ValueId f1 = model.projector.project(ps, tape, slot1 ? ep.fused : en.fused);
      ValueId f2 = model.projector.project(ps, tape, slot1 ? en.fused : ep.fused);
      MatchLayout layout =
          plan_match_layout(inst.query, slot1 ? inst.positive : inst.hard_negative,
                            slot1 ? inst.hard_negative : inst.positive, cfg.matching_mode,
                            slot1);
      qdm_terms.push_back(run_matcher(model.backbone, ps, tape, layout, fq, f1, f2).loss);
    }
  }

  ValueId cl = info_nce<double>(tape, embs, static_cast<double>(cfg.temperature));
  ValueId orth = tape.mean_all(tape.stack_scalars(orth_terms));
  ValueId total = tape.add(cl, tape.scale(orth, static_cast<double>(cfg.w_orth)));
  ValueId qdm{-1};
  std::vector<std::pair<std::string, ValueId>> components{{"L_cl", cl}, {"L_orth", orth}};
  if (!qdm_terms.empty()) {
    qdm = tape.mean_all(tape.stack_scalars(qdm_terms));
    total = tape.add(total, tape.scale(qdm, static_cast<double>(cfg.w_qdm)));
    components.emplace_back("L_qdm", qdm);
  }
  components.emplace_back("L_total", total);

  // Probe every parameter family, always covering the learnable tokens and
  // the projector (when present).
  std::vector<std::string> names;
  for (const auto& n : model.store.names()) {
    if (ps.bound(n)) names.push_back(n);
  }

  GradcheckReport report;
  for (std::size_t ci = 0; ci < components.size(); ++ci) {
    const auto& [cname, cid] = components[ci];
    GradcheckComponent comp;
    comp.name = cname;
    const bool tampered = cname == opts.tamper_component;

    tape.reset_grads();
    tape.backward(cid);

    Rng probe = Rng::keyed(seed, "gradcheck", {static_cast<std::uint64_t>(ci)});
    for (int p = 0; p < opts.probes_per_component; ++p) {
      // Round-robin over parameter names so every family is sampled.
      const std::string& pname = names[static_cast<std::size_t>(p) % names.size()];
      if (std::find(comp.probed_params.begin(), comp.probed_params.end(), pname) ==
          comp.probed_params.end()) {
        comp.probed_params.push_back(pname);
      }
      ValueId leaf = ps[pname];
      const TensorT<double> base = tape.value(leaf);
      const std::int64_t ix = static_cast<std::int64_t>(
          probe.next_below(static_cast<std::uint64_t>(base.numel())));
      double analytic = tape.grad(leaf)[ix];
      if (tampered) analytic *= 1.02;

      const double h = opts.fd_step * std::max(1.0, std::abs(base[ix]));
      TensorT<double> probe_t = base;
      probe_t[ix] = base[ix] + h;
      tape.set_leaf_value(leaf, probe_t);
      tape.replay();
      const double fp = tape.value(cid)[0];
      probe_t[ix] = base[ix] - h;
      tape.set_leaf_value(leaf, probe_t);
      tape.replay();
      const double fm = tape.value(cid)[0];
      tape.set_leaf_value(leaf, base);
      tape.replay();

      const double fd = (fp - fm) / (2.0 * h);
      const double scale = opts.atol / opts.rtol + std::max(std::abs(fd), std::abs(analytic));
      const double err = std::abs(fd - analytic) / scale;
      comp.max_scaled_err = std::max(comp.max_scaled_err, err);
      ++comp.checks;
      if (err > opts.rtol) comp.pass = false;
    }
    report.components.push_back(std::move(comp));
  }
  return report;
}

}  // namespace rematch
