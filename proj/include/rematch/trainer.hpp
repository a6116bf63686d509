// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rematch/autodiff.hpp"
#include "rematch/backbone.hpp"
#include "rematch/checkpoint.hpp"
#include "rematch/contrastive.hpp"
#include "rematch/embedder.hpp"
#include "rematch/errors.hpp"
#include "rematch/matcher.hpp"
#include "rematch/params.hpp"
#include "rematch/rng.hpp"
#include "rematch/sequence.hpp"
#include "rematch/synth.hpp"

namespace rematch {

// Everything the training loop needs to be reproducible from a seed.
struct TrainConfig {
  BackboneConfig backbone;

  // representation
  int k_tokens = 16;                                  // learnable tokens per side
  MatchingMode matching_mode = MatchingMode::kFull;   // document-matching auxiliary
  bool chat_wrap = true;                              // wrap encodes in chat markers

  // objective
  float temperature = 0.02f;
  float w_orth = 0.5f;
  float w_qdm = 0.1f;

  // schedule
  int steps = 2000;
  int batch_size = 64;
  float lr_peak = 1e-4f;
  float warmup_frac = 0.03f;

  // optimizer
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;

  std::uint64_t seed = 0;
  int n_threads = 1;  // batch sharding; results are identical for any value

  void validate() const {
    backbone.validate();
    if (k_tokens < 1) throw ValidationError("k_tokens must be >= 1");
    if (!(temperature > 0.0f)) throw ValidationError("temperature must be > 0");
    if (!(w_orth >= 0.0f)) throw ValidationError("w_orth must be >= 0");
    if (!(w_qdm >= 0.0f)) throw ValidationError("w_qdm must be >= 0");
    if (steps < 1) throw ValidationError("steps must be >= 1");
    if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
    if (!(lr_peak > 0.0f)) throw ValidationError("lr_peak must be > 0");
    if (!(warmup_frac >= 0.0f && warmup_frac <= 0.5f)) {
      throw ValidationError("warmup_frac must lie in [0, 0.5]");
    }
    if (n_threads < 1) throw ValidationError("n_threads must be >= 1");
  }
};

// Learning rate at `step` (defined on 0..steps inclusive): linear warmup to
// lr_peak over the warmup window, then cosine decay to exactly 0 at `steps`.
// The endpoints are returned exactly; the training loop evaluates this at
// the 0-based step index, so the first warmup step runs at 0.
inline double lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(cfg.steps) + "]");
  }
  const int warm = static_cast<int>(
      std::lround(static_cast<double>(cfg.warmup_frac) * cfg.steps));
  const double peak = static_cast<double>(cfg.lr_peak);
  if (step >= cfg.steps) return 0.0;
  if (warm > 0 && step <= warm) {
    return peak * static_cast<double>(step) / warm;  // step == warm -> exactly peak
  }
  const double progress = static_cast<double>(step - warm) / (cfg.steps - warm);
  return peak * 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// Total objective from its component values. The matching term is dropped
// entirely (not multiplied by zero) when matching is disabled.
inline double compose_total_loss(double loss_cl, double loss_orth, double loss_qdm,
                                 const TrainConfig& cfg) {
  double total = loss_cl + static_cast<double>(cfg.w_orth) * loss_orth;
  if (cfg.matching_mode != MatchingMode::kOff) {
    total += static_cast<double>(cfg.w_qdm) * loss_qdm;
  }
  return total;
}

// The trainable bundle: backbone + learnable tokens + matcher projector over
// one parameter store. Templated on the scalar so the gradcheck tooling can
// instantiate the whole pipeline in 64-bit.
template <class Real>
struct ModelT {
  TrainConfig cfg;
  BackboneT<Real> backbone;
  EmbedderT<Real> embedder;
  ProjectorT<Real> projector;
  ParamStoreT<Real> store;

  explicit ModelT(const TrainConfig& c)
      : cfg(c), backbone(c.backbone), embedder(&backbone, c.k_tokens),
        projector(c.backbone.d_model) {
    cfg.validate();
  }

  // The embedder holds a pointer to this model's backbone, so copies and
  // moves must rebind it rather than inherit the source's pointer.
  ModelT(const ModelT& other)
      : cfg(other.cfg), backbone(other.backbone), embedder(&backbone, other.cfg.k_tokens),
        projector(other.projector), store(other.store) {}

  ModelT(ModelT&& other) noexcept
      : cfg(std::move(other.cfg)), backbone(std::move(other.backbone)),
        embedder(&backbone, cfg.k_tokens), projector(std::move(other.projector)),
        store(std::move(other.store)) {}

  ModelT& operator=(const ModelT&) = delete;
  ModelT& operator=(ModelT&&) = delete;

  // Fresh name-keyed initialization. Backbone tensors depend only on
  // (seed, name), so configurations differing in k_tokens or matching mode
  // start from byte-identical backbone weights.
  void init_params() {
    backbone.init_params(store, cfg.seed);
    embedder.init_params(store, cfg.seed);
    if (cfg.matching_mode != MatchingMode::kOff) {
      projector.init_params(store, cfg.seed);
    }
  }

  // Replaces the parameter values with `loaded`, insisting on an exact
  // name/shape match so a checkpoint cannot silently half-apply.
  void adopt_params(const ParamStoreT<Real>& loaded) {
    ParamStoreT<Real> expect;
    std::swap(expect, store);
    if (expect.names().empty()) {
      ModelT fresh(cfg);
      fresh.init_params();
      std::swap(expect, fresh.store);
    }
    for (const auto& name : expect.names()) {
      if (!loaded.has(name)) {
        throw ValidationError("checkpoint is missing parameter \"" + name + "\"");
      }
      if (loaded.at(name).shape() != expect.at(name).shape()) {
        throw ValidationError("checkpoint parameter \"" + name + "\" has shape " +
                              loaded.at(name).shape_str() + ", model expects " +
                              expect.at(name).shape_str());
      }
    }
    for (const auto& name : loaded.names()) {
      if (!expect.has(name)) {
        throw ValidationError("checkpoint carries unknown parameter \"" + name + "\"");
      }
    }
    for (const auto& name : expect.names()) {
      store.add(name, loaded.at(name));
    }
  }

  // Forward-only fused embedding (no gradient bookkeeping). Used by
  // evaluation and by retrieval consumers.
  TensorT<Real> embed_fused(const TokenSequence& seq, Side side) const {
    TapeT<Real> tape(false);
    ParamSessionT<Real> ps(tape, store, false);
    MultiEmbedding me = embedder.encode(ps, tape, seq, side, cfg.chat_wrap);
    return tape.value(me.fused);
  }

  // Forward-only multi-embedding rows [k x d]; feeds orthogonality probes.
  TensorT<Real> embed_rows(const TokenSequence& seq, Side side) const {
    TapeT<Real> tape(false);
    ParamSessionT<Real> ps(tape, store, false);
    MultiEmbedding me = embedder.encode(ps, tape, seq, side, cfg.chat_wrap);
    return tape.value(me.rows);
  }
};

using Model = ModelT<float>;

// One metrics record per optimizer step; the CSV column order matches.
struct StepMetrics {
  int step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_cl = 0.0;
  double loss_orth = 0.0;
  double loss_qdm = 0.0;
  double grad_norm = 0.0;
};

// Supplies instance `index` of the batch at `step`. Implementations must be
// pure functions of (step, index) so reruns and resumes see identical data.
using DrawFn = std::function<TrainingInstance(int step, int index)>;

// Fresh synthetic data: batch slot i of step s is task instance s*B + i.
inline DrawFn synth_draw(const SynthTask& task, int batch_size) {
  return [&task, batch_size](int step, int index) {
    return task.instance(static_cast<std::uint64_t>(step) * batch_size +
                         static_cast<std::uint64_t>(index));
  };
}

// File-backed data: batch slots are seed-keyed draws from a fixed list.
inline DrawFn dataset_draw(const std::vector<TrainingInstance>& instances,
                           std::uint64_t seed) {
  if (instances.empty()) throw ContractError("dataset_draw needs at least one instance");
  return [&instances, seed](int step, int index) {
    Rng rng = Rng::keyed(seed, "batch", {static_cast<std::uint64_t>(step),
                                         static_cast<std::uint64_t>(index)});
    return instances[rng.next_below(instances.size())];
  };
}

template <class Real>
struct BatchResult {
  double loss_cl = 0.0;
  double loss_orth = 0.0;
  double loss_qdm = 0.0;
  double loss_total = 0.0;
  GradientSetT<Real> grads;
};

namespace detail {

// Everything one instance contributes, with its tape kept alive so the
// contrastive gradient can be pushed back through it afterwards.
template <class Real>
struct InstanceWork {
  TapeT<Real> tape;
  std::unique_ptr<ParamSessionT<Real>> session;
  ValueId fused_q{-1}, fused_p{-1}, fused_n{-1};
  std::array<ValueId, 3> orth{ValueId{-1}, ValueId{-1}, ValueId{-1}};
  ValueId qdm{-1};
  bool has_qdm = false;
  TensorT<Real> fused_q_v, fused_p_v, fused_n_v;
  std::array<double, 3> orth_v{0.0, 0.0, 0.0};
  double qdm_v = 0.0;
  GradientSetT<Real> grads;
};

template <class Real>
void build_instance(const ModelT<Real>& model, const TrainConfig& cfg, int step, int index,
                    const TrainingInstance& inst, InstanceWork<Real>& work) {
  work.session = std::make_unique<ParamSessionT<Real>>(work.tape, model.store);
  ParamSessionT<Real>& ps = *work.session;
  TapeT<Real>& tape = work.tape;

  MultiEmbedding eq = model.embedder.encode(ps, tape, inst.query, Side::kQuery, cfg.chat_wrap);
  MultiEmbedding ep =
      model.embedder.encode(ps, tape, inst.positive, Side::kDocument, cfg.chat_wrap);
  MultiEmbedding en =
      model.embedder.encode(ps, tape, inst.hard_negative, Side::kDocument, cfg.chat_wrap);
  work.fused_q = eq.fused;
  work.fused_p = ep.fused;
  work.fused_n = en.fused;
  work.fused_q_v = tape.value(eq.fused);
  work.fused_p_v = tape.value(ep.fused);
  work.fused_n_v = tape.value(en.fused);

  work.orth = {model.embedder.orthogonality_loss(tape, eq),
               model.embedder.orthogonality_loss(tape, ep),
               model.embedder.orthogonality_loss(tape, en)};
  for (int e = 0; e < 3; ++e) {
    work.orth_v[static_cast<std::size_t>(e)] =
        static_cast<double>(tape.value(work.orth[static_cast<std::size_t>(e)])[0]);
  }

  if (cfg.matching_mode != MatchingMode::kOff) {
    // Slot assignment is a keyed coin so document position carries no label
    // signal; the stream is auditable independently of the model.
    const bool positive_in_slot1 =
        Rng::keyed(cfg.seed, "slot",
                   {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(index)})
            .next_bool();
    ValueId fq = model.projector.project(ps, tape, eq.fused);
    ValueId f1 = model.projector.project(ps, tape, positive_in_slot1 ? ep.fused : en.fused);
    ValueId f2 = model.projector.project(ps, tape, positive_in_slot1 ? en.fused : ep.fused);
    MatchLayout layout = plan_match_layout(
        inst.query, positive_in_slot1 ? inst.positive : inst.hard_negative,
        positive_in_slot1 ? inst.hard_negative : inst.positive, cfg.matching_mode,
        positive_in_slot1);
    MatchRun<Real> run = run_matcher(model.backbone, ps, tape, layout, fq, f1, f2);
    work.qdm = run.loss;
    work.has_qdm = true;
    work.qdm_v = static_cast<double>(tape.value(run.loss)[0]);
  }
}

// Runs fn(i) for i in [0, n) across cfg.n_threads workers in contiguous
// chunks. Work items only touch their own slot, so the result is identical
// for every thread count.
inline void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
  const int workers = std::max(1, std::min(n_threads, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mu;
  const int per = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const int lo = w * per;
    const int hi = std::min(n, lo + per);
    if (lo >= hi) break;
    pool.emplace_back([&, lo, hi]() {
      try {
        for (int i = lo; i < hi; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace detail

// Loss components and parameter gradients of one batch. Three passes:
//   1. per-instance tapes: encodes, orthogonality terms, matcher run;
//   2. a joint contrastive tape over the fused embeddings of the batch;
//   3. the contrastive cotangents plus the weighted orthogonality/matching
//      seeds flow back through each held instance tape.
// Gradients accumulate over instances in index order regardless of thread
// count, so the reduction is bitwise deterministic.
template <class Real>
BatchResult<Real> batch_loss_and_grads(const ModelT<Real>& model, const TrainConfig& cfg,
                                       int step, const DrawFn& draw, bool want_grads) {
  const int b = cfg.batch_size;
  std::vector<std::unique_ptr<detail::InstanceWork<Real>>> works(static_cast<std::size_t>(b));

  detail::parallel_for(b, cfg.n_threads, [&](int i) {
    works[static_cast<std::size_t>(i)] = std::make_unique<detail::InstanceWork<Real>>();
    detail::build_instance(model, cfg, step, i, draw(step, i),
                           *works[static_cast<std::size_t>(i)]);
  });

  // Joint contrastive pass over leaf copies of the fused embeddings.
  TapeT<Real> ctape;
  std::vector<InstanceEmbeddings> embs;
  embs.reserve(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    auto& w = *works[static_cast<std::size_t>(i)];
    embs.push_back(InstanceEmbeddings{ctape.leaf(w.fused_q_v, true),
                                      ctape.leaf(w.fused_p_v, true),
                                      ctape.leaf(w.fused_n_v, true)});
  }
  ValueId cl = info_nce<Real>(ctape, embs, static_cast<Real>(cfg.temperature));

  BatchResult<Real> out;
  out.loss_cl = static_cast<double>(ctape.value(cl)[0]);
  double orth_sum = 0.0, qdm_sum = 0.0;
  for (const auto& w : works) {
    orth_sum += w->orth_v[0] + w->orth_v[1] + w->orth_v[2];
    qdm_sum += w->qdm_v;
  }
  out.loss_orth = orth_sum / (3.0 * b);
  out.loss_qdm = cfg.matching_mode == MatchingMode::kOff ? 0.0 : qdm_sum / b;
  out.loss_total = compose_total_loss(out.loss_cl, out.loss_orth, out.loss_qdm, cfg);

  if (!want_grads) return out;

  ctape.backward(cl);
  const Real orth_seed = static_cast<Real>(static_cast<double>(cfg.w_orth) / (3.0 * b));
  const Real qdm_seed = static_cast<Real>(static_cast<double>(cfg.w_qdm) / b);

  detail::parallel_for(b, cfg.n_threads, [&](int i) {
    auto& w = *works[static_cast<std::size_t>(i)];
    std::vector<std::pair<ValueId, TensorT<Real>>> seeds;
    seeds.reserve(7);
    seeds.emplace_back(w.fused_q, ctape.grad(embs[static_cast<std::size_t>(i)].query));
    seeds.emplace_back(w.fused_p, ctape.grad(embs[static_cast<std::size_t>(i)].positive));
    seeds.emplace_back(w.fused_n, ctape.grad(embs[static_cast<std::size_t>(i)].negative));
    if (orth_seed != Real(0)) {
      for (ValueId o : w.orth) seeds.emplace_back(o, TensorT<Real>::scalar(orth_seed));
    }
    if (w.has_qdm && qdm_seed != Real(0)) {
      seeds.emplace_back(w.qdm, TensorT<Real>::scalar(qdm_seed));
    }
    w.tape.backward_seeded(seeds);
    w.grads = w.session->collect();
  });

  for (const auto& w : works) out.grads.add_all(w->grads);
  return out;
}

// Adam with a global step count for bias correction. Moments live per
// parameter name; parameters that received no gradient this step keep their
// moments untouched.
template <class Real>
class AdamStateT {
 public:
  struct Moments {
    TensorT<Real> m, v;
  };

  std::int64_t step_count = 0;
  std::unordered_map<std::string, Moments> moments;

  void apply(ParamStoreT<Real>& store, const GradientSetT<Real>& grads, double lr,
             const TrainConfig& cfg) {
    ++step_count;
    const double b1 = static_cast<double>(cfg.adam_beta1);
    const double b2 = static_cast<double>(cfg.adam_beta2);
    const double eps = static_cast<double>(cfg.adam_eps);
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step_count));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step_count));
    for (const auto& name : store.names()) {
      if (!grads.has(name)) continue;
      TensorT<Real>& p = store.at(name);
      const TensorT<Real>& g = grads.at(name);
      auto it = moments.find(name);
      if (it == moments.end()) {
        Moments zero{TensorT<Real>::zeros(p.shape()), TensorT<Real>::zeros(p.shape())};
        it = moments.emplace(name, std::move(zero)).first;
      }
      TensorT<Real>& m = it->second.m;
      TensorT<Real>& v = it->second.v;
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
        const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
        m[i] = static_cast<Real>(mi);
        v[i] = static_cast<Real>(vi);
        p[i] = static_cast<Real>(static_cast<double>(p[i]) -
                                 lr * (mi / corr1) / (std::sqrt(vi / corr2) + eps));
      }
    }
  }
};

// Serializes model parameters plus optimizer moments into one checkpoint.
// Moment tensors are stored under reserved "opt.m."/"opt.v." prefixes; the
// completed-step counter and config snapshot ride in the JSON meta block.
inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"backbone",
       {{"n_layers", c.backbone.n_layers},
        {"d_model", c.backbone.d_model},
        {"n_heads", c.backbone.n_heads},
        {"d_ff", c.backbone.d_ff},
        {"vocab_size", c.backbone.vocab_size},
        {"max_seq_len", c.backbone.max_seq_len},
        {"ln_eps", c.backbone.ln_eps}}},
      {"k_tokens", c.k_tokens},
      {"matching_mode", matching_mode_name(c.matching_mode)},
      {"chat_wrap", c.chat_wrap},
      {"temperature", c.temperature},
      {"w_orth", c.w_orth},
      {"w_qdm", c.w_qdm},
      {"steps", c.steps},
      {"batch_size", c.batch_size},
      {"lr_peak", c.lr_peak},
      {"warmup_frac", c.warmup_frac},
      {"adam_beta1", c.adam_beta1},
      {"adam_beta2", c.adam_beta2},
      {"adam_eps", c.adam_eps},
      {"seed", c.seed},
      {"n_threads", c.n_threads}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    const auto& bb = j.at("backbone");
    c.backbone.n_layers = bb.at("n_layers").get<int>();
    c.backbone.d_model = bb.at("d_model").get<int>();
    c.backbone.n_heads = bb.at("n_heads").get<int>();
    c.backbone.d_ff = bb.at("d_ff").get<int>();
    c.backbone.vocab_size = bb.at("vocab_size").get<int>();
    c.backbone.max_seq_len = bb.at("max_seq_len").get<int>();
    c.backbone.ln_eps = bb.at("ln_eps").get<float>();
    c.k_tokens = j.at("k_tokens").get<int>();
    c.matching_mode = matching_mode_from_name(j.at("matching_mode").get<std::string>());
    c.chat_wrap = j.at("chat_wrap").get<bool>();
    c.temperature = j.at("temperature").get<float>();
    c.w_orth = j.at("w_orth").get<float>();
    c.w_qdm = j.at("w_qdm").get<float>();
    c.steps = j.at("steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr_peak = j.at("lr_peak").get<float>();
    c.warmup_frac = j.at("warmup_frac").get<float>();
    c.adam_beta1 = j.at("adam_beta1").get<float>();
    c.adam_beta2 = j.at("adam_beta2").get<float>();
    c.adam_eps = j.at("adam_eps").get<float>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.n_threads = j.at("n_threads").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed train config snapshot: ") + e.what());
  }
  c.validate();
  return c;
}

inline void save_train_checkpoint(const std::string& path, const Model& model,
                                  const AdamStateT<float>& adam, int completed_steps,
                                  nlohmann::json extra_meta = nlohmann::json::object()) {
  ParamStoreT<float> combined;
  for (const auto& name : model.store.names()) combined.add(name, model.store.at(name));
  for (const auto& name : model.store.names()) {
    auto it = adam.moments.find(name);
    if (it == adam.moments.end()) continue;
    combined.add("opt.m." + name, it->second.m);
    combined.add("opt.v." + name, it->second.v);
  }
  nlohmann::json meta = std::move(extra_meta);
  meta["step"] = completed_steps;
  meta["adam_step_count"] = adam.step_count;
  meta["config"] = train_config_to_json(model.cfg);
  save_checkpoint(path, combined, meta);
}

struct TrainState {
  Model model;
  AdamStateT<float> adam;
  int completed_steps = 0;
  nlohmann::json meta;

  explicit TrainState(const TrainConfig& cfg) : model(cfg) {}
};

inline TrainState load_train_checkpoint(const std::string& path) {
  LoadedCheckpoint ck = load_checkpoint(path);
  if (!ck.meta.contains("config")) {
    throw CorruptHeaderError(path + ": checkpoint meta lacks a config snapshot");
  }
  TrainState state(train_config_from_json(ck.meta.at("config")));

  ParamStoreT<float> params;
  for (const auto& name : ck.store.names()) {
    if (name.rfind("opt.", 0) == 0) continue;
    params.add(name, ck.store.at(name));
  }
  state.model.adopt_params(params);
  for (const auto& name : state.model.store.names()) {
    const std::string mname = "opt.m." + name;
    const std::string vname = "opt.v." + name;
    if (!ck.store.has(mname)) continue;
    if (!ck.store.has(vname)) {
      throw CorruptHeaderError(path + ": first moment without second moment for \"" + name +
                               "\"");
    }
    state.adam.moments[name] =
        typename AdamStateT<float>::Moments{ck.store.at(mname), ck.store.at(vname)};
  }
  try {
    state.completed_steps = ck.meta.at("step").get<int>();
    state.adam.step_count = ck.meta.at("adam_step_count").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptHeaderError(path + ": checkpoint meta is malformed: " + e.what());
  }
  state.meta = ck.meta;
  return state;
}

// One optimizer step. Throws NumericError with the batch coordinates when a
// loss component or the gradient goes non-finite.
inline StepMetrics train_step(Model& model, AdamStateT<float>& adam, int step,
                              const DrawFn& draw) {
  const TrainConfig& cfg = model.cfg;
  const double lr = lr_at(step, cfg);
  BatchResult<float> br = batch_loss_and_grads(model, cfg, step, draw, true);

  const bool finite_losses = std::isfinite(br.loss_total) && std::isfinite(br.loss_cl) &&
                             std::isfinite(br.loss_orth) && std::isfinite(br.loss_qdm);
  if (!finite_losses || !br.grads.all_finite()) {
    throw NumericError("non-finite " + std::string(finite_losses ? "gradient" : "loss") +
                       " at step " + std::to_string(step) + " (seed " +
                       std::to_string(cfg.seed) + ", batch_size " +
                       std::to_string(cfg.batch_size) + ")");
  }

  StepMetrics m;
  m.step = step;
  m.lr = lr;
  m.loss_total = br.loss_total;
  m.loss_cl = br.loss_cl;
  m.loss_orth = br.loss_orth;
  m.loss_qdm = br.loss_qdm;
  m.grad_norm = br.grads.l2_norm();
  adam.apply(model.store, br.grads, lr, cfg);
  return m;
}

// Runs steps [first_step, cfg.steps); invokes on_step after each update.
inline void train_loop(Model& model, AdamStateT<float>& adam, int first_step,
                       const DrawFn& draw,
                       const std::function<void(const StepMetrics&)>& on_step) {
  for (int s = first_step; s < model.cfg.steps; ++s) {
    StepMetrics m = train_step(model, adam, s, draw);
    if (on_step) on_step(m);
  }
}

}  // namespace rematch
