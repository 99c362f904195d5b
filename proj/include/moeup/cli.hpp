// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// The `moeup` command line. Every command prints one JSON document to stdout
// and progress/human text to stderr. Exit codes: 0 ok, 1 invalid input,
// 2 I/O failure.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moeup/accounting.hpp"
#include "moeup/analysis.hpp"
#include "moeup/checkpoint.hpp"
#include "moeup/config.hpp"
#include "moeup/corpus.hpp"
#include "moeup/toy_lm.hpp"
#include "moeup/trainer.hpp"
#include "moeup/upcycle.hpp"

namespace moeup::cli {

namespace fs = std::filesystem;

inline constexpr const char* kPlanFile = "reinit_plan.json";
inline constexpr const char* kCurveFile = "curve.jsonl";

inline Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ValidationError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json_file(const Json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

// A config file is either a bare model config or an object with any of the
// sections "model", "train" and "upcycle".
struct ConfigFile {
  std::optional<Json> model;
  std::optional<Json> train;
  std::optional<Json> upcycle;
};

inline ConfigFile read_config_file(const std::string& path) {
  ConfigFile c;
  if (path.empty()) return c;
  const Json j = read_json_file(path);
  if (!j.is_object()) throw ValidationError("config file " + path + " must hold a JSON object");
  if (!j.contains("model") && !j.contains("train") && !j.contains("upcycle")) {
    c.model = j;
    return c;
  }
  detail::reject_unknown_keys(j, {"model", "train", "upcycle"}, "config file");
  if (j.contains("model")) c.model = j.at("model");
  if (j.contains("train")) c.train = j.at("train");
  if (j.contains("upcycle")) c.upcycle = j.at("upcycle");
  return c;
}

inline void require_distinct(const std::string& in, const std::string& out) {
  std::error_code ec;
  if (fs::weakly_canonical(in, ec) == fs::weakly_canonical(out, ec))
    throw ValidationError("--out must differ from --in (inputs are never modified)");
}

inline void require_flag(bool present, const std::string& flag, const std::string& command) {
  if (!present) throw ValidationError(command + ": " + flag + " is required");
}

struct Options {
  std::string config;
  std::vector<std::string> in;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;

  // model overrides
  std::optional<std::size_t> experts, top_k, granularity, shared, seq_len_model;

  // upcycle
  std::string method;
  std::optional<double> ratio, noise_sigma, noise_fraction, scale_factor;
  std::string shared_init;

  // train
  std::string corpus;
  std::optional<std::size_t> steps, batch_size, seq_len, warmup, tail;
  std::optional<double> lr, min_lr, balance_coeff, weight_decay, clip;
  std::string balance;
  std::optional<double> tokens;
  std::size_t log_every = 100;

  // corpus
  std::size_t per_domain = 200;
  std::size_t length = 64;

  // analysis
  std::string plan;
  std::string base, other;
  std::size_t window = 5;
  std::string csv;
};

// ---------------------------------------------------------------------------
// Commands

inline ModelConfig resolve_model(const ConfigFile& cf, std::optional<ModelConfig> fallback,
                                 const Options& o) {
  ModelConfig c;
  if (cf.model) {
    c = model_config_from_json(*cf.model);
  } else if (fallback) {
    c = *fallback;
  } else {
    throw ValidationError("a model config is required (--config)");
  }
  if (o.experts) c.num_experts = *o.experts;
  if (o.top_k) c.top_k = *o.top_k;
  if (o.granularity) c.granularity = *o.granularity;
  if (o.shared) c.shared_experts = *o.shared;
  if (o.seq_len_model) c.seq_len = *o.seq_len_model;
  c.validate();
  return c;
}

inline Json cmd_init(const Options& o, std::ostream& err) {
  require_flag(!o.out.empty(), "--out", "init");
  const ConfigFile cf = read_config_file(o.config);
  const ModelConfig config = resolve_model(cf, std::nullopt, o);
  const Checkpoint ck = from_scratch(config, o.seed);
  save(ck, o.out);
  err << "initialized " << (config.is_moe() ? "MoE" : "dense") << " model with "
      << ck.parameter_count() << " parameters -> " << o.out << "\n";
  return Json{{"command", "init"},      {"out", o.out},
              {"seed", o.seed},         {"config", to_json(config)},
              {"parameters", ck.parameter_count()}, {"content_hash", content_hash(ck)}};
}

inline Json cmd_upcycle(const Options& o, std::ostream& err) {
  require_flag(!o.out.empty(), "--out", "upcycle");
  const ConfigFile cf = read_config_file(o.config);
  UpcycleSpec spec = cf.upcycle ? upcycle_spec_from_json(*cf.upcycle) : UpcycleSpec{};
  if (!o.method.empty()) spec.method = parse_method(o.method);
  if (o.ratio) spec.ratio = *o.ratio;
  if (o.seed_set) spec.seed = o.seed;
  if (o.noise_sigma) spec.noise_sigma = *o.noise_sigma;
  if (o.noise_fraction) spec.noise_fraction = *o.noise_fraction;
  if (o.scale_factor) spec.scale_factor = *o.scale_factor;
  if (!o.shared_init.empty()) spec.shared_init = parse_shared_init(o.shared_init);
  spec.validate();

  std::vector<Checkpoint> parents;
  for (const auto& dir : o.in) {
    require_distinct(dir, o.out);
    parents.push_back(load(dir));
  }
  if (spec.method != Method::kFromScratch)
    require_flag(!parents.empty(), "--in", "upcycle --method " + method_name(spec.method));

  // Target architecture: the parent's trunk with 8 experts, top-2, unless the
  // config file or flags say otherwise. granularity/shared follow the target
  // config unless the upcycle section pins them.
  const bool pinned_m = cf.upcycle && cf.upcycle->contains("granularity");
  const bool pinned_ks = cf.upcycle && cf.upcycle->contains("shared");
  std::optional<ModelConfig> fallback;
  if (!parents.empty()) {
    ModelConfig c = parents.front().config;
    c.num_experts = 8;
    c.top_k = 2;
    if (pinned_m) c.granularity = spec.granularity;
    if (pinned_ks) c.shared_experts = spec.shared;
    fallback = c;
  }
  const ModelConfig config = resolve_model(cf, fallback, o);
  if (!pinned_m) spec.granularity = config.granularity;
  if (!pinned_ks) spec.shared = config.shared_experts;

  const UpcycleResult result = upcycle(parents, config, spec);
  save(result.checkpoint, o.out);
  const fs::path plan_path = fs::path(o.out) / kPlanFile;
  if (result.plan) {
    write_json_file(to_json(*result.plan), plan_path);
  } else {
    std::error_code ec;
    fs::remove(plan_path, ec);
  }
  err << "upcycled (" << method_name(spec.method) << ", r=" << spec.ratio << ", "
      << config.routed_experts() << " routed experts, top-" << config.top_k << ") -> " << o.out
      << "\n";
  Json j = {{"command", "upcycle"},
            {"in", o.in},
            {"out", o.out},
            {"spec", to_json(spec)},
            {"config", to_json(config)},
            {"metadata", to_json(result.checkpoint.metadata)},
            {"parameters", result.checkpoint.parameter_count()},
            {"content_hash", content_hash(result.checkpoint)}};
  j["plan"] = result.plan ? Json(plan_path.string()) : Json(nullptr);
  return j;
}

inline TrainConfig resolve_train(const ConfigFile& cf, const Options& o) {
  TrainConfig c = cf.train ? train_config_from_json(*cf.train) : TrainConfig{};
  if (o.batch_size) c.batch_size = *o.batch_size;
  if (o.seq_len) c.seq_len = *o.seq_len;
  if (o.warmup) c.warmup_steps = *o.warmup;
  if (o.tail) c.tail_steps = *o.tail;
  if (o.lr) c.max_lr = *o.lr;
  if (o.min_lr) c.min_lr = *o.min_lr;
  if (o.balance_coeff) c.balance_coeff = *o.balance_coeff;
  if (o.weight_decay) c.weight_decay = *o.weight_decay;
  if (o.clip) c.grad_clip = *o.clip;
  if (!o.balance.empty()) c.balance_mode = parse_balance_mode(o.balance);
  if (o.seed_set) c.seed = o.seed;
  if (o.steps && o.tokens) throw ValidationError("give at most one of --steps and --tokens");
  if (o.steps) c.total_steps = *o.steps;
  if (o.tokens) {
    if (!(*o.tokens > 0.0) || !std::isfinite(*o.tokens))
      throw ValidationError("--tokens must be positive");
    const double per_step = static_cast<double>(c.batch_size * c.seq_len);
    if (per_step <= 0.0) throw ValidationError("batch_size and seq_len must be positive");
    c.total_steps = static_cast<std::size_t>(std::ceil(*o.tokens / per_step));
  }
  c.validate();
  return c;
}

inline Json cmd_train(const Options& o, std::ostream& err) {
  require_flag(o.in.size() == 1, "exactly one --in", "train");
  require_flag(!o.out.empty(), "--out", "train");
  require_flag(!o.corpus.empty(), "--corpus", "train");
  require_distinct(o.in.front(), o.out);
  const ConfigFile cf = read_config_file(o.config);
  const TrainConfig tc = resolve_train(cf, o);
  const Checkpoint parent = load(o.in.front());
  const Corpus corpus = read_corpus(o.corpus);
  for (const auto& s : corpus.sequences)
    for (auto t : s.tokens)
      if (t >= parent.config.vocab_size)
        throw ValidationError("corpus token " + std::to_string(t) + " outside the model vocabulary");

  const ToyLm model = from_checkpoint(parent);
  const double initial = evaluate_loss(model, corpus, tc.seq_len);
  err << "training " << tc.total_steps << " steps, initial loss " << initial << "\n";
  const std::size_t every = std::max<std::size_t>(1, o.log_every);
  TrainResult r = train(model, corpus, tc, [&](const CurvePoint& p) {
    if ((p.step + 1) % every == 0 || p.step + 1 == tc.total_steps)
      err << "step " << p.step + 1 << "/" << tc.total_steps << " loss " << p.train_loss
          << " lm " << p.lm_loss << " lr " << p.lr << "\n";
  });
  const double final_loss = evaluate_loss(r.model, corpus, tc.seq_len);

  Provenance meta = parent.metadata;
  meta.extra["trained_from"] = content_hash(parent);
  meta.extra["train"] = to_json(tc);
  const Checkpoint out = to_checkpoint(r.model, meta);
  save(out, o.out);
  write_curve(r.curve, fs::path(o.out) / kCurveFile);
  err << "final loss " << final_loss << " -> " << o.out << "\n";
  return Json{{"command", "train"},
              {"in", o.in.front()},
              {"out", o.out},
              {"corpus", o.corpus},
              {"train", to_json(tc)},
              {"steps", tc.total_steps},
              {"tokens", r.curve.points.empty() ? 0 : r.curve.points.back().tokens},
              {"initial_eval_loss", initial},
              {"final_eval_loss", final_loss},
              {"final_train_loss", r.curve.points.empty() ? 0.0 : r.curve.points.back().train_loss},
              {"curve", (fs::path(o.out) / kCurveFile).string()},
              {"content_hash", content_hash(out)}};
}

inline ModelConfig config_for_accounting(const Options& o) {
  const ConfigFile cf = read_config_file(o.config);
  std::optional<ModelConfig> fallback;
  if (!o.in.empty()) fallback = model_config_from_json(read_manifest(o.in.front()).at("config"));
  if (!cf.model && !fallback) throw ValidationError("--config or --in is required");
  return resolve_model(cf, fallback, o);
}

inline Json cmd_params(const Options& o, std::ostream& err) {
  const ModelConfig c = config_for_accounting(o);
  const ParamBreakdown p = count_params(c);
  err << "total " << p.total << " / active " << p.active << " parameters\n";
  return Json{{"command", "params"}, {"config", to_json(c)}, {"params", to_json(p)}};
}

inline Json cmd_flops(const Options& o, std::ostream& err) {
  const ModelConfig c = config_for_accounting(o);
  const FlopsBreakdown f = flops_forward(c, c.seq_len);
  Json j = {{"command", "flops"}, {"config", to_json(c)}, {"forward", to_json(f)}};
  err << "forward FLOPs per sequence of " << c.seq_len << " tokens: " << f.total_forward << "\n";
  if (o.tokens) {
    if (!(*o.tokens > 0.0) || !std::isfinite(*o.tokens))
      throw ValidationError("--tokens must be positive");
    const double t = training_flops(c, *o.tokens);
    j["training_tokens"] = *o.tokens;
    j["training_flops"] = t;
    err << "training FLOPs for " << *o.tokens << " tokens: " << t << "\n";
  }
  return j;
}

inline Json cmd_corpus(const Options& o, std::ostream& err) {
  require_flag(!o.out.empty(), "--out", "corpus");
  if (o.per_domain == 0 || o.length < 2)
    throw ValidationError("--per-domain must be positive and --length at least 2");
  const Corpus c = generate_corpus(o.seed, o.per_domain, o.length);
  write_corpus(c, o.out);
  err << "wrote " << c.size() << " sequences -> " << o.out << "\n";
  return Json{{"command", "corpus"}, {"out", o.out},        {"seed", o.seed},
              {"per_domain", o.per_domain}, {"length", o.length}, {"sequences", c.size()},
              {"domains", corpus_domains()}, {"vocab_size", kCorpusVocab}};
}

inline Json cmd_analyze_routing(const Options& o, std::ostream& err) {
  require_flag(o.in.size() == 1, "exactly one --in", "analyze-routing");
  require_flag(!o.corpus.empty(), "--corpus", "analyze-routing");
  const Checkpoint ck = load(o.in.front());
  if (!ck.config.is_moe()) throw ValidationError("analyze-routing needs an MoE checkpoint");
  const Corpus corpus = read_corpus(o.corpus);
  const std::size_t seq_len = o.seq_len ? *o.seq_len : std::numeric_limits<std::size_t>::max();
  const EvalResult ev = evaluate(from_checkpoint(ck), corpus, seq_len);
  const RoutingSummary s = summarize_routing(ev.trace);
  for (const auto& w : s.warnings) err << "warning: " << w << "\n";
  if (!o.csv.empty()) write_routing_csv(s, o.csv);
  for (const auto& l : s.layers) err << "layer " << l.layer << " entropy " << l.entropy << "\n";
  Json j = {{"command", "analyze-routing"}, {"in", o.in.front()}, {"corpus", o.corpus},
            {"eval_loss", ev.loss}, {"routing", to_json(s)}};
  j["csv"] = o.csv.empty() ? Json(nullptr) : Json(o.csv);
  return j;
}

inline Json cmd_analyze_overlap(const Options& o, std::ostream& err) {
  fs::path plan_path = o.plan;
  std::size_t k = o.top_k.value_or(2);
  if (plan_path.empty()) {
    require_flag(o.in.size() == 1, "--plan or --in", "analyze-overlap");
    plan_path = fs::path(o.in.front()) / kPlanFile;
    if (!o.top_k) k = model_config_from_json(read_manifest(o.in.front()).at("config")).top_k;
  }
  if (!fs::exists(plan_path)) throw IoError("re-initialization plan not found: " + plan_path.string());
  const ReinitPlan plan = reinit_plan_from_json(read_json_file(plan_path));
  const OverlapReport r = overlap_report(plan, k, o.seed);
  if (!o.csv.empty()) {
    std::ofstream out(o.csv, std::ios::trunc);
    if (!out) throw IoError("cannot open " + o.csv + " for writing");
    out.precision(17);
    out << "layer,a,b,common,fraction\n";
    for (const auto& l : r.layers)
      for (const auto& p : l.pairs)
        out << l.layer << ',' << p.a << ',' << p.b << ',' << p.common << ',' << p.fraction << '\n';
    if (!out) throw IoError("failed writing " + o.csv);
  }
  for (const auto& l : r.layers)
    err << "layer " << l.layer << ": pair overlap " << l.pair_mean << " (expected " << l.pair_exact
        << " +- " << l.pair_se << "), " << k << "-wise " << l.subset_mean << " (expected "
        << l.subset_exact << " +- " << l.subset_se << ")\n";
  return Json{{"command", "analyze-overlap"}, {"plan", plan_path.string()}, {"report", to_json(r)}};
}

inline Json cmd_catch_up(const Options& o, std::ostream& err) {
  require_flag(!o.base.empty(), "--base", "catch-up");
  require_flag(!o.other.empty(), "--other", "catch-up");
  if (o.window == 0) throw ValidationError("--window must be at least 1");
  const LossCurve base = smooth_curve(read_curve(o.base), o.window);
  const LossCurve other = smooth_curve(read_curve(o.other), o.window);
  const auto points = catch_up(base, other);
  if (!o.csv.empty()) write_catch_up_csv(points, o.csv);
  std::size_t missing = 0;
  for (const auto& p : points) missing += p.missing();
  err << points.size() << " points, " << missing << " never reached by the other curve\n";
  Json j = {{"command", "catch-up"}, {"base", o.base},   {"other", o.other},
            {"window", o.window},    {"points", to_json(points)}, {"missing", missing}};
  j["csv"] = o.csv.empty() ? Json(nullptr) : Json(o.csv);
  return j;
}

inline Json cmd_inspect(const Options& o, std::ostream& err) {
  require_flag(o.in.size() == 1, "exactly one --in", "inspect");
  const Json manifest = read_manifest(o.in.front());
  const Checkpoint ck = load(o.in.front());
  const ParamBreakdown p = count_params(ck.config);
  err << o.in.front() << ": " << ck.tensors.size() << " tensors, " << ck.parameter_count()
      << " parameters, method " << ck.metadata.method << "\n";
  Json j = {{"command", "inspect"},
            {"in", o.in.front()},
            {"manifest", manifest},
            {"tensor_count", ck.tensors.size()},
            {"parameters", ck.parameter_count()},
            {"params", to_json(p)},
            {"content_hash", content_hash(ck)}};
  const fs::path plan = fs::path(o.in.front()) / kPlanFile;
  j["plan"] = fs::exists(plan) ? Json(plan.string()) : Json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"Dense-to-MoE upcycling toolkit"};
  app.name("moeup");
  app.require_subcommand(1);
  Options o;

  auto model_flags = [&](CLI::App* s) {
    s->add_option("--experts", o.experts, "Number of experts n");
    s->add_option("--top-k", o.top_k, "Experts per token k");
    s->add_option("--granularity", o.granularity, "Fine-grained split m");
    s->add_option("--shared", o.shared, "Shared experts k_s");
  };
  auto seed_flag = [&](CLI::App* s) {
    s->add_option("--seed", o.seed, "Random seed")->each([&](const std::string&) { o.seed_set = true; });
  };

  CLI::App* init = app.add_subcommand("init", "Randomly initialize a model");
  init->add_option("--config", o.config, "Model config JSON")->required();
  init->add_option("--out", o.out, "Output checkpoint directory")->required();
  seed_flag(init);
  model_flags(init);

  CLI::App* up = app.add_subcommand("upcycle", "Build an MoE checkpoint from dense parent(s)");
  up->add_option("--in", o.in, "Dense parent; for btx the seed model followed by branches");
  up->add_option("--out", o.out, "Output checkpoint directory")->required();
  up->add_option("--config", o.config, "Config JSON (model and/or upcycle sections)");
  up->add_option("--method", o.method, "scratch, naive, rnu, drop, btx or fg-drop");
  up->add_option("--ratio", o.ratio, "Re-initialization ratio r");
  up->add_option("--noise-sigma", o.noise_sigma, "rnu noise std");
  up->add_option("--noise-fraction", o.noise_fraction, "rnu fraction of entries perturbed");
  up->add_option("--shared-init", o.shared_init, "Shared block init: copy or drop");
  up->add_option("--scale-factor", o.scale_factor, "fg-drop expert output scaling");
  seed_flag(up);
  model_flags(up);

  CLI::App* tr = app.add_subcommand("train", "Train a checkpoint on a corpus");
  tr->add_option("--in", o.in, "Input checkpoint")->required();
  tr->add_option("--out", o.out, "Output checkpoint directory")->required();
  tr->add_option("--corpus", o.corpus, "Corpus file")->required();
  tr->add_option("--config", o.config, "Config JSON (train section)");
  tr->add_option("--steps", o.steps, "Optimizer steps");
  tr->add_option("--tokens", o.tokens, "Token budget (sets the step count)");
  tr->add_option("--batch-size", o.batch_size, "Sequences per step");
  tr->add_option("--seq-len", o.seq_len, "Training window length");
  tr->add_option("--lr", o.lr, "Peak learning rate");
  tr->add_option("--min-lr", o.min_lr, "Final learning rate");
  tr->add_option("--warmup", o.warmup, "Warmup steps");
  tr->add_option("--tail", o.tail, "Constant min-lr steps at the end");
  tr->add_option("--weight-decay", o.weight_decay, "AdamW weight decay");
  tr->add_option("--clip", o.clip, "Gradient norm clip");
  tr->add_option("--balance", o.balance, "Balancing loss: global, layerwise or off");
  tr->add_option("--balance-coeff", o.balance_coeff, "Balancing loss weight");
  tr->add_option("--log-every", o.log_every, "Progress interval in steps");
  seed_flag(tr);

  CLI::App* fl = app.add_subcommand("flops", "Forward and training FLOPs");
  fl->add_option("--config", o.config, "Model config JSON");
  fl->add_option("--in", o.in, "Checkpoint whose config to use");
  fl->add_option("--tokens", o.tokens, "Training tokens");
  fl->add_option("--seq-len", o.seq_len_model, "Sequence length override");
  model_flags(fl);

  CLI::App* pa = app.add_subcommand("params", "Total and active parameter counts");
  pa->add_option("--config", o.config, "Model config JSON");
  pa->add_option("--in", o.in, "Checkpoint whose config to use");
  model_flags(pa);

  CLI::App* co = app.add_subcommand("corpus", "Generate the synthetic three-domain corpus");
  co->add_option("--out", o.out, "Output corpus file")->required();
  co->add_option("--per-domain", o.per_domain, "Sequences per domain");
  co->add_option("--length", o.length, "Tokens per sequence");
  seed_flag(co);

  CLI::App* ar = app.add_subcommand("analyze-routing", "Per-domain expert routing statistics");
  ar->add_option("--in", o.in, "MoE checkpoint")->required();
  ar->add_option("--corpus", o.corpus, "Corpus file")->required();
  ar->add_option("--seq-len", o.seq_len, "Evaluation window length");
  ar->add_option("--csv", o.csv, "Write routing fractions as CSV");

  CLI::App* ao = app.add_subcommand("analyze-overlap", "Retained-dimension overlap of a plan");
  ao->add_option("--plan", o.plan, "reinit_plan.json");
  ao->add_option("--in", o.in, "Upcycled checkpoint holding reinit_plan.json");
  ao->add_option("--top-k", o.top_k, "Subset size k");
  ao->add_option("--csv", o.csv, "Write pairwise overlaps as CSV");
  seed_flag(ao);

  CLI::App* cu = app.add_subcommand("catch-up", "Token deficit between two loss curves");
  cu->add_option("--base", o.base, "Base curve JSONL")->required();
  cu->add_option("--other", o.other, "Other curve JSONL")->required();
  cu->add_option("--window", o.window, "Moving-average window in points");
  cu->add_option("--csv", o.csv, "Write the series as CSV");

  CLI::App* in = app.add_subcommand("inspect", "Describe a checkpoint");
  in->add_option("--in", o.in, "Checkpoint directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    Json result;
    if (init->parsed()) result = cmd_init(o, err);
    else if (up->parsed()) result = cmd_upcycle(o, err);
    else if (tr->parsed()) result = cmd_train(o, err);
    else if (fl->parsed()) result = cmd_flops(o, err);
    else if (pa->parsed()) result = cmd_params(o, err);
    else if (co->parsed()) result = cmd_corpus(o, err);
    else if (ar->parsed()) result = cmd_analyze_routing(o, err);
    else if (ao->parsed()) result = cmd_analyze_overlap(o, err);
    else if (cu->parsed()) result = cmd_catch_up(o, err);
    else if (in->parsed()) result = cmd_inspect(o, err);
    out << result.dump(2) << "\n";
    return 0;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace moeup::cli
