// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "rematch/checkpoint.hpp"
#include "rematch/dataset.hpp"
#include "rematch/errors.hpp"
#include "rematch/evalkit.hpp"
#include "rematch/matcher.hpp"
#include "rematch/synth.hpp"
#include "rematch/trainer.hpp"

namespace rematch {

inline constexpr const char* kToolVersion = "0.1.0";

namespace cli_detail {

// Strict section reader: every field is typed, missing required fields and
// unknown keys are reported with their full path (e.g. "train.lr_peak").
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) {
      throw ValidationError("config: " + path_ + " must be a JSON object");
    }
  }

  // Absent section: all reads yield defaults, done() is a no-op.
  Section() = default;

  bool present() const { return j_ != nullptr; }

  int geti(const char* key, std::optional<int> def = {}) {
    const nlohmann::json* v = fetch(key, def.has_value());
    if (!v) return *def;
    if (!v->is_number_integer()) wrong_type(key, "an integer");
    return v->get<int>();
  }

  std::uint64_t getu64(const char* key, std::optional<std::uint64_t> def = {}) {
    const nlohmann::json* v = fetch(key, def.has_value());
    if (!v) return *def;
    if (!v->is_number_integer() || (v->is_number_integer() && v->get<std::int64_t>() < 0)) {
      wrong_type(key, "a non-negative integer");
    }
    return v->get<std::uint64_t>();
  }

  float getf(const char* key, std::optional<float> def = {}) {
    const nlohmann::json* v = fetch(key, def.has_value());
    if (!v) return *def;
    if (!v->is_number()) wrong_type(key, "a number");
    return v->get<float>();
  }

  bool getb(const char* key, std::optional<bool> def = {}) {
    const nlohmann::json* v = fetch(key, def.has_value());
    if (!v) return *def;
    if (!v->is_boolean()) wrong_type(key, "a boolean");
    return v->get<bool>();
  }

  std::string gets(const char* key, std::optional<std::string> def = {}) {
    const nlohmann::json* v = fetch(key, def.has_value());
    if (!v) return *def;
    if (!v->is_string()) wrong_type(key, "a string");
    return v->get<std::string>();
  }

  void done() {
    if (!j_) return;
    for (auto it = j_->begin(); it != j_->end(); ++it) {
      if (!consumed_.count(it.key())) {
        throw ValidationError("config: unknown field " + path_ + "." + it.key());
      }
    }
  }

 private:
  const nlohmann::json* fetch(const char* key, bool has_default) {
    consumed_.insert(key);
    if (!j_ || !j_->contains(key)) {
      if (has_default) return nullptr;
      throw ValidationError("config: missing required field " + path_ + "." + key);
    }
    return &j_->at(key);
  }

  [[noreturn]] void wrong_type(const char* key, const char* want) const {
    throw ValidationError("config: field " + path_ + "." + key + " must be " + want);
  }

  const nlohmann::json* j_ = nullptr;
  std::string path_;
  std::set<std::string> consumed_;
};

struct LoadedConfig {
  nlohmann::json raw;
  bool has_model = false;
  bool has_task = false;
  bool has_train = false;
  bool has_gen = false;
};

// One config file can drive every subcommand; each command reads only the
// sections it needs, but a section name outside this list is always a typo.
inline LoadedConfig load_config(const std::string& path) {
  static const std::set<std::string> kSections{"model", "task", "train", "gen"};
  LoadedConfig c;
  const std::string text = binio::read_file(path);
  try {
    c.raw = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: " + path + " is not valid JSON: " + e.what());
  }
  if (!c.raw.is_object()) throw ValidationError("config: " + path + " must be a JSON object");
  for (auto it = c.raw.begin(); it != c.raw.end(); ++it) {
    if (!kSections.count(it.key())) {
      throw ValidationError("config: unknown section \"" + it.key() + "\" in " + path);
    }
  }
  c.has_model = c.raw.contains("model");
  c.has_task = c.raw.contains("task");
  c.has_train = c.raw.contains("train");
  c.has_gen = c.raw.contains("gen");
  return c;
}

inline int read_env_threads() {
  const char* v = std::getenv("REMATCH_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (!end || *end != '\0' || n < 1 || n > 1024) {
    throw ValidationError("REMATCH_THREADS must be an integer in [1, 1024]");
  }
  return static_cast<int>(n);
}

// model + train sections -> TrainConfig (n_threads comes from the env).
// checkpoint_every lives in the train section but outside TrainConfig, so it
// is handed back separately when the caller wants it.
inline TrainConfig parse_train_config(const LoadedConfig& c, int* checkpoint_every = nullptr) {
  if (!c.has_model) throw ValidationError("config: missing required section \"model\"");
  Section model(c.raw.at("model"), "model");
  TrainConfig t;
  t.backbone.n_layers = model.geti("n_layers", 4);
  t.backbone.d_model = model.geti("d_model", 128);
  t.backbone.n_heads = model.geti("n_heads", 4);
  t.backbone.d_ff = model.geti("d_ff", 512);
  t.backbone.vocab_size = model.geti("vocab_size", 512);
  t.backbone.max_seq_len = model.geti("max_seq_len", 512);
  t.backbone.ln_eps = model.getf("ln_eps", 1e-5f);
  t.k_tokens = model.geti("k_tokens", 16);
  const std::string mode = model.gets("matching_mode", std::string("full"));
  try {
    t.matching_mode = matching_mode_from_name(mode);
  } catch (const ValidationError&) {
    throw ValidationError(
        "config: field model.matching_mode must be one of \"full\", \"feat_only\", \"off\"");
  }
  t.chat_wrap = model.getb("chat_wrap", true);
  model.done();

  Section train = c.has_train ? Section(c.raw.at("train"), "train") : Section();
  t.steps = train.geti("steps", 2000);
  t.batch_size = train.geti("batch_size", 64);
  t.lr_peak = train.getf("lr_peak", 1e-4f);
  t.warmup_frac = train.getf("warmup_frac", 0.03f);
  t.temperature = train.getf("temperature", 0.02f);
  t.w_orth = train.getf("w_orth", 0.5f);
  t.w_qdm = train.getf("w_qdm", 0.1f);
  t.adam_beta1 = train.getf("adam_beta1", 0.9f);
  t.adam_beta2 = train.getf("adam_beta2", 0.999f);
  t.adam_eps = train.getf("adam_eps", 1e-8f);
  t.seed = train.getu64("seed", 0);
  t.n_threads = read_env_threads();
  const int every = train.geti("checkpoint_every", 0);
  if (every < 0) throw ValidationError("config: field train.checkpoint_every must be >= 0");
  if (checkpoint_every) *checkpoint_every = every;
  train.done();

  if (t.backbone.vocab_size < kMinVocabSize) {
    throw ValidationError("config: model.vocab_size must be at least " +
                          std::to_string(kMinVocabSize) +
                          " to cover the reserved token blocks");
  }
  t.validate();
  return t;
}

// task section; patch_dim defaults to the model width when one is given.
inline TaskConfig parse_task_config(const LoadedConfig& c, std::optional<int> model_d) {
  if (!c.has_task) throw ValidationError("config: missing required section \"task\"");
  Section task(c.raw.at("task"), "task");
  TaskConfig t;
  t.d_latent = task.geti("d_latent", 16);
  t.text_len = task.geti("text_len", 12);
  t.n_patches = task.geti("n_patches", 8);
  if (model_d.has_value()) {
    t.patch_dim = task.geti("patch_dim", *model_d);
  } else {
    t.patch_dim = task.geti("patch_dim");
  }
  t.noise_std = task.getf("noise_std", 0.1f);
  t.hard_negative_angle = task.getf("hard_negative_angle", 0.35f);
  t.seed = task.getu64("seed", 0);
  task.done();
  t.validate();
  if (model_d.has_value() && t.patch_dim != *model_d) {
    throw ValidationError("config: task.patch_dim (" + std::to_string(t.patch_dim) +
                          ") must equal model.d_model (" + std::to_string(*model_d) + ")");
  }
  return t;
}

struct GenParams {
  std::string kind = "train";
  int count = 0;
  int pool_size = 64;
  float hard_fraction = 0.25f;
};

inline GenParams parse_gen_params(const LoadedConfig& c) {
  if (!c.has_gen) throw ValidationError("config: missing required section \"gen\"");
  Section gen(c.raw.at("gen"), "gen");
  GenParams g;
  g.kind = gen.gets("kind", std::string("train"));
  g.count = gen.geti("count");
  g.pool_size = gen.geti("pool_size", 64);
  g.hard_fraction = gen.getf("hard_fraction", 0.25f);
  gen.done();
  if (g.kind != "train" && g.kind != "eval") {
    throw ValidationError("config: field gen.kind must be \"train\" or \"eval\"");
  }
  if (g.count < 1) throw ValidationError("config: field gen.count must be >= 1");
  if (g.kind == "eval" && g.pool_size < 2) {
    throw ValidationError("config: field gen.pool_size must be >= 2");
  }
  if (!(g.hard_fraction >= 0.0f && g.hard_fraction <= 1.0f)) {
    throw ValidationError("config: field gen.hard_fraction must lie in [0, 1]");
  }
  return g;
}

inline nlohmann::json task_json(const TaskConfig& t) { return detail::task_to_json(t); }

inline nlohmann::json run_fingerprint_payload(const TrainConfig& cfg, const TaskConfig& task) {
  nlohmann::json config = train_config_to_json(cfg);
  // Training output is bitwise invariant to the worker count, so the thread
  // setting is not part of a run's identity; checkpoints stay resumable under
  // a different REMATCH_THREADS.
  config.erase("n_threads");
  return nlohmann::json{{"config", std::move(config)}, {"task", task_json(task)}};
}

inline void write_manifest(const std::string& path, const std::string& command,
                           std::uint64_t seed, nlohmann::json resolved_config,
                           nlohmann::json artifacts) {
  nlohmann::json manifest{{"tool", "rematch"},
                          {"version", kToolVersion},
                          {"command", command},
                          {"seed", seed},
                          {"config", resolved_config},
                          {"config_fingerprint", fingerprint_json(resolved_config)},
                          {"artifacts", std::move(artifacts)}};
  binio::write_file(path, manifest.dump(2) + "\n");
}

// Pre-flight compatibility between a training dataset and the model.
inline void check_dataset_compat(const TrainDataset& ds, const TrainConfig& cfg) {
  if (ds.task.patch_dim != cfg.backbone.d_model) {
    throw ValidationError("dataset patches have dim " + std::to_string(ds.task.patch_dim) +
                          " but model.d_model is " + std::to_string(cfg.backbone.d_model));
  }
  int max_token = -1;
  for (const auto& inst : ds.instances) {
    max_token = std::max({max_token, inst.query.max_token_id(), inst.positive.max_token_id(),
                          inst.hard_negative.max_token_id()});
    inst.query.validate(ds.task.patch_dim);
    inst.positive.validate(ds.task.patch_dim);
    inst.hard_negative.validate(ds.task.patch_dim);
  }
  if (max_token >= cfg.backbone.vocab_size) {
    throw ValidationError("dataset uses token id " + std::to_string(max_token) +
                          " but model.vocab_size is " +
                          std::to_string(cfg.backbone.vocab_size));
  }
}

inline int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  LoadedConfig c = load_config(config_path);
  std::optional<int> model_d;
  if (c.has_model) {
    Section model(c.raw.at("model"), "model");
    model_d = model.geti("d_model", 128);
    // Other model fields are legal here; gen-data only needs the width.
  }
  TaskConfig task = parse_task_config(c, model_d);
  GenParams gen = parse_gen_params(c);

  nlohmann::json resolved{{"task", task_json(task)},
                          {"gen",
                           {{"kind", gen.kind},
                            {"count", gen.count},
                            {"pool_size", gen.pool_size},
                            {"hard_fraction", gen.hard_fraction}}}};
  write_manifest(out_path + ".manifest.json", "gen-data", task.seed, resolved,
                 nlohmann::json{{"dataset", out_path}});

  SynthTask st(task);
  if (gen.kind == "train") {
    TrainDataset ds;
    ds.task = task;
    ds.instances.reserve(static_cast<std::size_t>(gen.count));
    for (int i = 0; i < gen.count; ++i) {
      ds.instances.push_back(st.instance(static_cast<std::uint64_t>(i)));
    }
    write_train_dataset(out_path, ds);
  } else {
    EvalDataset ds;
    ds.task = task;
    ds.hard_fraction = gen.hard_fraction;
    ds.queries.reserve(static_cast<std::size_t>(gen.count));
    for (int i = 0; i < gen.count; ++i) {
      ds.queries.push_back(
          st.eval_query(static_cast<std::uint64_t>(i), gen.pool_size, gen.hard_fraction));
    }
    write_eval_dataset(out_path, ds);
  }
  std::cout << "wrote " << gen.kind << " dataset (" << gen.count << " records) to " << out_path
            << "\n";
  return 0;
}

inline int cmd_train(const std::string& config_path, const std::string& out_dir,
                     const std::string& data_path, const std::string& resume_path) {
  LoadedConfig c = load_config(config_path);
  int checkpoint_every = 0;
  TrainConfig cfg = parse_train_config(c, &checkpoint_every);

  // Data source: a dataset file or the fresh synthetic stream.
  TrainDataset file_ds;
  std::optional<SynthTask> synth;
  TaskConfig task;
  DrawFn draw;
  if (!data_path.empty()) {
    file_ds = read_train_dataset(data_path);
    check_dataset_compat(file_ds, cfg);
    task = file_ds.task;
    draw = dataset_draw(file_ds.instances, cfg.seed);
  } else {
    task = parse_task_config(c, cfg.backbone.d_model);
    synth.emplace(task);
    draw = synth_draw(*synth, cfg.batch_size);
  }

  const nlohmann::json fp_payload = run_fingerprint_payload(cfg, task);
  const std::string fingerprint = fingerprint_json(fp_payload);

  // Resume: the checkpoint must come from this exact configuration.
  std::optional<TrainState> resumed;
  if (!resume_path.empty()) {
    resumed.emplace(load_train_checkpoint(resume_path));
    const std::string have = resumed->meta.value("fingerprint", std::string("<absent>"));
    if (have != fingerprint) {
      throw ValidationError("--resume checkpoint was produced by a different configuration "
                            "(fingerprint " +
                            have + ", this run is " + fingerprint + ")");
    }
    if (resumed->completed_steps >= cfg.steps) {
      throw ValidationError("--resume checkpoint already completed " +
                            std::to_string(resumed->completed_steps) + " of " +
                            std::to_string(cfg.steps) + " steps");
    }
  }

  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = out_dir + "/metrics.csv";
  const std::string final_ckpt = out_dir + "/checkpoint_final.rmck";
  write_manifest(out_dir + "/manifest.json", "train", cfg.seed,
                 nlohmann::json{{"config", train_config_to_json(cfg)},
                                {"task", task_json(task)},
                                {"data", data_path.empty() ? "synthetic-stream" : data_path},
                                {"resume", resume_path}},
                 nlohmann::json{{"metrics", metrics_path}, {"checkpoint", final_ckpt}});

  // Fail on capacity problems before burning any training time.
  {
    TrainingInstance probe = draw(resumed ? resumed->completed_steps : 0, 0);
    if (cfg.matching_mode != MatchingMode::kOff) {
      MatchLayout layout = plan_match_layout(probe.query, probe.positive, probe.hard_negative,
                                             cfg.matching_mode, true);
      if (layout.length() > cfg.backbone.max_seq_len) {
        throw ValidationError("matcher layout needs " + std::to_string(layout.length()) +
                              " positions but model.max_seq_len is " +
                              std::to_string(cfg.backbone.max_seq_len));
      }
    }
  }

  Model model(cfg);
  AdamStateT<float> adam;
  int first_step = 0;
  if (resumed) {
    model.adopt_params(resumed->model.store);
    adam = std::move(resumed->adam);
    first_step = resumed->completed_steps;
  } else {
    model.init_params();
  }

  MetricsWriter metrics(metrics_path, /*append=*/!resume_path.empty());
  nlohmann::json meta{{"fingerprint", fingerprint}, {"task", task_json(task)}};
  train_loop(model, adam, first_step, draw, [&](const StepMetrics& m) {
    metrics.write(m);
    const int done = m.step + 1;
    if (checkpoint_every > 0 && done % checkpoint_every == 0 && done < cfg.steps) {
      save_train_checkpoint(out_dir + "/checkpoint_step" + std::to_string(done) + ".rmck",
                            model, adam, done, meta);
    }
  });
  save_train_checkpoint(final_ckpt, model, adam, cfg.steps, meta);
  std::cout << "trained " << (cfg.steps - first_step) << " steps; checkpoint at " << final_ckpt
            << "\n";
  return 0;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
                    const std::string& out_path) {
  TrainState state = load_train_checkpoint(ckpt_path);
  EvalDataset ds = read_eval_dataset(data_path);

  if (ds.task.patch_dim != state.model.cfg.backbone.d_model) {
    throw ValidationError("eval dataset patches have dim " + std::to_string(ds.task.patch_dim) +
                          " but the checkpointed model uses d_model " +
                          std::to_string(state.model.cfg.backbone.d_model));
  }
  if (state.meta.contains("task")) {
    const nlohmann::json have = task_json(ds.task);
    nlohmann::json want = state.meta.at("task");
    // The eval pool may legitimately use a different generator seed; all
    // structural fields must match the training task.
    want.erase("seed");
    nlohmann::json have_cmp = have;
    have_cmp.erase("seed");
    if (have_cmp != want) {
      throw ValidationError("eval dataset task configuration is incompatible with the "
                            "checkpoint (dataset " +
                            have_cmp.dump() + ", checkpoint " + want.dump() + ")");
    }
  }

  EvalReport report = evaluate(model_embed_fn(state.model), ds.queries);
  report.config_fingerprint = state.meta.value("fingerprint", std::string());
  binio::write_file(out_path, report.to_json().dump(2) + "\n");
  std::cout << "hit@1 " << report.hit_at_1 << " over " << report.n_queries << " queries\n";
  return 0;
}

inline int cmd_gradcheck(const std::string& config_path, const std::string& tamper,
                         int probes, const std::string& out_path) {
  LoadedConfig c = load_config(config_path);
  TrainConfig cfg = parse_train_config(c);
  static const std::set<std::string> kComponents{"", "L_cl", "L_orth", "L_qdm", "L_total"};
  if (!kComponents.count(tamper)) {
    throw ValidationError("--tamper must name a loss component (L_cl, L_orth, L_qdm, L_total)");
  }
  GradcheckOptions opts;
  opts.probes_per_component = probes;
  opts.tamper_component = tamper;
  GradcheckReport report = gradcheck_suite(cfg, cfg.seed, opts);
  const std::string text = report.to_json().dump(2) + "\n";
  if (!out_path.empty()) binio::write_file(out_path, text);
  std::cout << text;
  return report.all_pass() ? 0 : 3;
}

inline int cmd_mask_dump(const std::string& config_path, const std::string& out_prefix) {
  LoadedConfig c = load_config(config_path);
  TrainConfig cfg = parse_train_config(c);
  if (cfg.matching_mode == MatchingMode::kOff) {
    throw ValidationError("mask-dump needs model.matching_mode full or feat_only");
  }
  TaskConfig task = parse_task_config(c, cfg.backbone.d_model);
  SynthTask st(task);
  TrainingInstance inst = st.instance(0);
  // Both slot assignments, so positional symmetry is visible side by side.
  for (const bool slot1 : {true, false}) {
    MatchLayout layout =
        plan_match_layout(inst.query, slot1 ? inst.positive : inst.hard_negative,
                          slot1 ? inst.hard_negative : inst.positive, cfg.matching_mode, slot1);
    dump_match_mask(layout, out_prefix + (slot1 ? "_slot1" : "_slot2"));
  }
  std::cout << "wrote " << out_prefix << "_slot1.{pgm,json} and " << out_prefix
            << "_slot2.{pgm,json}\n";
  return 0;
}

}  // namespace cli_detail

inline int cli_main(int argc, char** argv) {
  CLI::App app{"rematch: training and evaluation testbed for multimodal retrieval embeddings"};
  app.set_version_flag("--version", std::string("rematch ") + kToolVersion);
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, resume_path, ckpt_path, tamper;
  int probes = 24;

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  gen->add_option("--config", config_path, "JSON config with task/gen sections")->required();
  gen->add_option("--out", out_path, "Output dataset path")->required();

  CLI::App* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config_path, "JSON config with model/task/train sections")
      ->required();
  train->add_option("--out", out_path, "Output directory for checkpoints and metrics")
      ->required();
  train->add_option("--data", data_path, "Training dataset file (default: synthetic stream)");
  train->add_option("--resume", resume_path, "Checkpoint to resume from");

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on an eval dataset");
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--data", data_path, "Eval dataset file")->required();
  eval_cmd->add_option("--out", out_path, "Report JSON path")->required();

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  gradcheck->add_option("--config", config_path, "JSON config with model/train sections")
      ->required();
  gradcheck->add_option("--tamper", tamper,
                        "Corrupt this component's analytic gradients (negative control)");
  gradcheck->add_option("--probes", probes, "Finite-difference probes per component")
      ->check(CLI::Range(1, 10000));
  gradcheck->add_option("--out", out_path, "Also write the report JSON here");

  CLI::App* mask = app.add_subcommand("mask-dump", "Dump matcher attention masks as PGM+JSON");
  mask->add_option("--config", config_path, "JSON config with model/task sections")->required();
  mask->add_option("--out", out_path, "Output path prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cli_detail::cmd_gen_data(config_path, out_path);
    if (train->parsed()) {
      return cli_detail::cmd_train(config_path, out_path, data_path, resume_path);
    }
    if (eval_cmd->parsed()) return cli_detail::cmd_eval(ckpt_path, data_path, out_path);
    if (gradcheck->parsed()) {
      return cli_detail::cmd_gradcheck(config_path, tamper, probes, out_path);
    }
    if (mask->parsed()) return cli_detail::cmd_mask_dump(config_path, out_path);
    std::cerr << "rematch: no subcommand\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "rematch: numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "rematch: i/o error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "rematch: error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "rematch: error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace rematch
