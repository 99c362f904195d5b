// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Continued training of the toy LM: AdamW with decoupled weight decay,
// global-norm clipping, a cosine schedule with a constant tail, and an
// auxiliary load-balancing loss n * sum_i f_i P_i (f = share of top-k
// assignments, P = mean router probability), either per layer or pooled
// over all layers.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "moeup/corpus.hpp"
#include "moeup/parallel.hpp"
#include "moeup/routing_trace.hpp"
#include "moeup/toy_lm.hpp"

namespace moeup {

enum class BalanceMode { kGlobal, kLayerwise, kOff };

inline std::string balance_mode_name(BalanceMode m) {
  switch (m) {
    case BalanceMode::kGlobal: return "global";
    case BalanceMode::kLayerwise: return "layerwise";
    case BalanceMode::kOff: return "off";
  }
  return "unknown";
}

inline BalanceMode parse_balance_mode(const std::string& s) {
  if (s == "global") return BalanceMode::kGlobal;
  if (s == "layerwise") return BalanceMode::kLayerwise;
  if (s == "off") return BalanceMode::kOff;
  throw ValidationError("unknown balance mode '" + s + "' (expected global, layerwise, off)");
}

struct TrainConfig {
  double max_lr = 3e-3;
  double min_lr = 3e-4;
  std::size_t total_steps = 300;
  std::size_t warmup_steps = 0;
  std::size_t tail_steps = 0;  // constant min_lr at the end
  std::size_t batch_size = 8;
  std::size_t seq_len = 32;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double balance_coeff = 0.02;
  BalanceMode balance_mode = BalanceMode::kGlobal;
  std::uint64_t seed = 0;

  void validate() const {
    require(std::isfinite(max_lr) && std::isfinite(min_lr) && min_lr >= 0.0 && min_lr <= max_lr,
            "learning rates must satisfy 0 <= min_lr <= max_lr");
    require(warmup_steps + tail_steps <= total_steps,
            "warmup_steps + tail_steps must not exceed total_steps");
    require(batch_size >= 1, "batch_size must be at least 1");
    require(seq_len >= 2, "seq_len must be at least 2");
    require(weight_decay >= 0.0 && grad_clip > 0.0 && balance_coeff >= 0.0,
            "weight_decay and balance_coeff must be >= 0, grad_clip > 0");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0,
            "adam betas must be in [0, 1) and eps > 0");
  }
};

inline Json to_json(const TrainConfig& c) {
  return Json{{"max_lr", c.max_lr},           {"min_lr", c.min_lr},
              {"total_steps", c.total_steps}, {"warmup_steps", c.warmup_steps},
              {"tail_steps", c.tail_steps},   {"batch_size", c.batch_size},
              {"seq_len", c.seq_len},         {"weight_decay", c.weight_decay},
              {"grad_clip", c.grad_clip},     {"beta1", c.beta1},
              {"beta2", c.beta2},             {"eps", c.eps},
              {"balance_coeff", c.balance_coeff},
              {"balance_mode", balance_mode_name(c.balance_mode)},
              {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const Json& j) {
  detail::reject_unknown_keys(j,
                              {"max_lr", "min_lr", "total_steps", "warmup_steps", "tail_steps",
                               "batch_size", "seq_len", "weight_decay", "grad_clip", "beta1",
                               "beta2", "eps", "balance_coeff", "balance_mode", "seed"},
                              "train config");
  TrainConfig c;
  try {
    auto num = [&](const char* key, double& field) {
      if (j.contains(key)) field = j.at(key).get<double>();
    };
    auto count = [&](const char* key, std::size_t& field) {
      if (j.contains(key)) field = detail::json_count(j, key);
    };
    num("max_lr", c.max_lr);
    num("min_lr", c.min_lr);
    count("total_steps", c.total_steps);
    count("warmup_steps", c.warmup_steps);
    count("tail_steps", c.tail_steps);
    count("batch_size", c.batch_size);
    count("seq_len", c.seq_len);
    num("weight_decay", c.weight_decay);
    num("grad_clip", c.grad_clip);
    num("beta1", c.beta1);
    num("beta2", c.beta2);
    num("eps", c.eps);
    num("balance_coeff", c.balance_coeff);
    if (j.contains("balance_mode")) c.balance_mode = parse_balance_mode(j.at("balance_mode").get<std::string>());
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("invalid train config: ") + e.what());
  }
  c.validate();
  return c;
}

// Linear warmup to max_lr, cosine decay to min_lr, then min_lr for the last
// tail_steps steps. With warmup_steps = 0, step 0 runs at max_lr.
inline double cosine_lr(std::size_t step, const TrainConfig& c) {
  require(step <= c.total_steps, "cosine_lr: step beyond total_steps");
  if (step < c.warmup_steps)
    return c.max_lr * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  const std::size_t decay = c.total_steps - c.tail_steps - c.warmup_steps;
  const std::size_t into = step - c.warmup_steps;
  if (decay == 0 || into >= decay) return c.min_lr;
  const double progress = static_cast<double>(into) / static_cast<double>(decay);
  return c.min_lr + 0.5 * (c.max_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// Balancing loss and its gradient with respect to each router probability.
struct BalanceTerms {
  double loss = 0.0;
  // coeff[l][i] = dL / dp(l, t, i), identical for every token t.
  std::vector<std::vector<double>> coeff;
};

inline BalanceTerms balance_terms(const RoutingTrace& trace, BalanceMode mode) {
  if (trace.records.empty()) throw ValidationError("load balance loss: empty routing trace");
  BalanceTerms out;
  if (mode == BalanceMode::kOff) return out;
  const std::size_t L = trace.num_layers, n = trace.num_experts;
  require(L > 0 && n > 0, "load balance loss: trace has no MoE layers");
  std::vector<std::vector<double>> assign(L, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> prob(L, std::vector<double>(n, 0.0));
  std::vector<double> tokens(L, 0.0), picks(L, 0.0);
  for (const auto& r : trace.records) {
    require(r.layer < L && r.probs.size() == n, "load balance loss: malformed record");
    for (std::size_t e : r.selected) assign[r.layer][e] += 1.0;
    for (std::size_t i = 0; i < n; ++i) prob[r.layer][i] += r.probs[i];
    tokens[r.layer] += 1.0;
    picks[r.layer] += static_cast<double>(r.selected.size());
  }
  const double nd = static_cast<double>(n);
  // n * sum_i f_i P_i for one pool of records, plus dL/dp per token.
  auto pooled = [&](const std::vector<double>& a, const std::vector<double>& p, double toks,
                    double pk, std::vector<double>& coeff) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double f = a[i] / pk;
      loss += f * (p[i] / toks);
      coeff[i] = nd * f / toks;
    }
    return nd * loss;
  };
  out.coeff.assign(L, std::vector<double>(n, 0.0));
  if (mode == BalanceMode::kLayerwise) {
    double active = 0.0;
    for (std::size_t l = 0; l < L; ++l) active += tokens[l] > 0 ? 1.0 : 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      if (tokens[l] == 0) continue;
      out.loss += pooled(assign[l], prob[l], tokens[l], picks[l], out.coeff[l]);
      for (double& v : out.coeff[l]) v /= active;
    }
    out.loss /= active;
  } else {
    double all_tokens = 0.0, all_picks = 0.0;
    std::vector<double> a(n, 0.0), p(n, 0.0);
    for (std::size_t l = 0; l < L; ++l) {
      all_tokens += tokens[l];
      all_picks += picks[l];
      for (std::size_t i = 0; i < n; ++i) {
        a[i] += assign[l][i];
        p[i] += prob[l][i];
      }
    }
    out.loss = pooled(a, p, all_tokens, all_picks, out.coeff[0]);
    for (std::size_t l = 1; l < L; ++l) out.coeff[l] = out.coeff[0];
  }
  return out;
}

inline double load_balance_loss(const RoutingTrace& trace, BalanceMode mode) {
  return balance_terms(trace, mode).loss;
}

struct CurvePoint {
  std::size_t step = 0;
  std::uint64_t tokens = 0;  // processed after this step
  double train_loss = 0.0;
  double lm_loss = 0.0;
  double balance_loss = 0.0;
  double lr = 0.0;

  bool operator==(const CurvePoint&) const = default;
};

struct LossCurve {
  std::vector<CurvePoint> points;

  bool empty() const { return points.empty(); }
  bool operator==(const LossCurve&) const = default;
};

inline Json to_json(const CurvePoint& p) {
  return Json{{"step", p.step},         {"tokens", p.tokens},
              {"train_loss", p.train_loss}, {"lm_loss", p.lm_loss},
              {"balance_loss", p.balance_loss}, {"lr", p.lr}};
}

// JSONL, one CurvePoint object per line.
inline void write_curve(const LossCurve& curve, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& p : curve.points) out << to_json(p).dump() << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

inline LossCurve read_curve(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open curve " + path.string());
  LossCurve curve;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      CurvePoint p;
      p.step = j.value("step", std::size_t{0});
      p.tokens = j.at("tokens").get<std::uint64_t>();
      p.lm_loss = j.at("lm_loss").get<double>();
      p.train_loss = j.value("train_loss", p.lm_loss);
      p.balance_loss = j.value("balance_loss", 0.0);
      p.lr = j.value("lr", 0.0);
      if (!curve.points.empty() && p.tokens <= curve.points.back().tokens)
        throw ValidationError("curve " + path.string() + ": tokens must be strictly increasing");
      curve.points.push_back(p);
    } catch (const Json::exception& e) {
      throw ValidationError("curve " + path.string() + ": " + e.what());
    }
  }
  return curve;
}

struct AdamState {
  ToyLm m;
  ToyLm v;
  std::size_t step = 0;
};

inline AdamState adam_init(const ToyLm& model) { return {zeros_like(model), zeros_like(model), 0}; }

inline double global_grad_norm(const ToyLm& grad) {
  double s = 0.0;
  for_each_parameter(grad, [&](const std::string&, const Matrix& g) {
    for (double v : g.values()) s += v * v;
  });
  return std::sqrt(s);
}

// Rescales the gradient so its global norm is at most max_norm; returns the
// norm before clipping.
inline double clip_grad_norm(ToyLm& grad, double max_norm) {
  const double norm = global_grad_norm(grad);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for_each_parameter(grad, [&](const std::string&, Matrix& g) {
      for (double& v : g.values()) v *= scale;
    });
  }
  return norm;
}

// Norm gains are not decayed.
inline bool decays(const std::string& name) { return !name.ends_with("norm"); }

// One AdamW update: p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps).
inline void adamw_step(ToyLm& model, const ToyLm& grad, AdamState& state, double lr,
                       const TrainConfig& c) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  std::vector<Matrix*> ms, vs;
  std::vector<const Matrix*> gs;
  for_each_parameter(state.m, [&](const std::string&, Matrix& w) { ms.push_back(&w); });
  for_each_parameter(state.v, [&](const std::string&, Matrix& w) { vs.push_back(&w); });
  for_each_parameter(grad, [&](const std::string&, const Matrix& w) { gs.push_back(&w); });
  std::size_t idx = 0;
  for_each_parameter(model, [&](const std::string& name, Matrix& p) {
    auto pv = p.values();
    auto mv = ms[idx]->values();
    auto vv = vs[idx]->values();
    const auto gv = gs[idx]->values();
    const double decay = decays(name) ? 1.0 - lr * c.weight_decay : 1.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = c.beta1 * mv[i] + (1.0 - c.beta1) * gv[i];
      vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * gv[i] * gv[i];
      pv[i] = pv[i] * decay - lr * (mv[i] / bc1) / (std::sqrt(vv[i] / bc2) + c.eps);
    }
    ++idx;
  });
}

inline std::span<const std::uint32_t> training_window(const Sequence& s, std::size_t seq_len) {
  return std::span<const std::uint32_t>(s.tokens.data(), std::min(seq_len, s.tokens.size()));
}

struct BatchResult {
  double lm_loss = 0.0;
  double balance_loss = 0.0;
  ToyLm grad;
  RoutingTrace trace;
};

// Loss and gradient for a batch: mean next-token loss over sequences plus
// balance_coeff times the balancing loss over the whole batch trace.
inline BatchResult batch_gradient(const ToyLm& model, const std::vector<const Sequence*>& batch,
                                  const TrainConfig& c) {
  const std::size_t B = batch.size();
  std::vector<LmCache> caches(B);
  parallel_for(B, [&](std::size_t b) {
    caches[b] = lm_forward_cached(model, training_window(*batch[b], c.seq_len));
  });
  BatchResult out;
  for (std::size_t b = 0; b < B; ++b) {
    out.lm_loss += caches[b].loss / static_cast<double>(B);
    out.trace.append(routing_trace(model, caches[b], batch[b]->domain));
  }
  LmBackwardOptions opts;
  opts.lm_scale = 1.0 / static_cast<double>(B);
  if (model.config.is_moe() && c.balance_mode != BalanceMode::kOff && !out.trace.empty()) {
    BalanceTerms bt = balance_terms(out.trace, c.balance_mode);
    out.balance_loss = bt.loss;
    for (auto& layer : bt.coeff)
      for (double& v : layer) v *= c.balance_coeff;
    opts.prob_coeff = std::move(bt.coeff);
  }
  std::vector<ToyLm> grads(B);
  parallel_for(B, [&](std::size_t b) {
    grads[b] = zeros_like(model);
    lm_backward(model, caches[b], opts, grads[b]);
  });
  out.grad = std::move(grads[0]);
  for (std::size_t b = 1; b < B; ++b) {
    std::vector<Matrix*> dst;
    for_each_parameter(out.grad, [&](const std::string&, Matrix& w) { dst.push_back(&w); });
    std::size_t idx = 0;
    for_each_parameter(grads[b], [&](const std::string&, const Matrix& w) {
      auto d = dst[idx++]->values();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += w.values()[i];
    });
  }
  return out;
}

struct TrainResult {
  ToyLm model;
  LossCurve curve;
};

// Batches are drawn with replacement from `corpus` by a stream keyed on
// (seed, step), so a run is reproducible from its config alone.
template <typename Callback>
TrainResult train(ToyLm model, const Corpus& corpus, const TrainConfig& c, Callback&& on_step) {
  c.validate();
  require(!corpus.empty(), "train: empty corpus");
  for (const auto& s : corpus.sequences)
    require(s.tokens.size() >= 2, "train: every sequence needs at least two tokens");
  TrainResult out;
  AdamState state = adam_init(model);
  std::uint64_t tokens = 0;
  for (std::size_t step = 0; step < c.total_steps; ++step) {
    RngStream pick(c.seed, {0x7261696eULL, step});
    std::vector<const Sequence*> batch;
    for (std::size_t b = 0; b < c.batch_size; ++b)
      batch.push_back(&corpus.sequences[pick.next_below(corpus.size())]);
    BatchResult br = batch_gradient(model, batch, c);
    const double total = br.lm_loss + c.balance_coeff * br.balance_loss;
    if (!std::isfinite(total))
      throw TrainingError("non-finite loss at step " + std::to_string(step) + " (lm_loss=" +
                          std::to_string(br.lm_loss) + ", balance_loss=" +
                          std::to_string(br.balance_loss) + ")");
    clip_grad_norm(br.grad, c.grad_clip);
    const double lr = cosine_lr(step, c);
    adamw_step(model, br.grad, state, lr, c);
    for (const auto* s : batch) tokens += training_window(*s, c.seq_len).size();
    CurvePoint p{step, tokens, total, br.lm_loss, br.balance_loss, lr};
    out.curve.points.push_back(p);
    on_step(p);
  }
  out.model = std::move(model);
  return out;
}

inline TrainResult train(ToyLm model, const Corpus& corpus, const TrainConfig& c) {
  return train(std::move(model), corpus, c, [](const CurvePoint&) {});
}

struct EvalResult {
  double loss = 0.0;  // mean next-token loss over sequences
  RoutingTrace trace;
};

inline EvalResult evaluate(const ToyLm& model, const Corpus& corpus, std::size_t seq_len) {
  require(!corpus.empty(), "evaluate: empty corpus");
  std::vector<double> losses(corpus.size());
  std::vector<RoutingTrace> traces(corpus.size());
  parallel_for(corpus.size(), [&](std::size_t i) {
    const auto& s = corpus.sequences[i];
    const LmCache cache = lm_forward_cached(model, training_window(s, seq_len));
    losses[i] = cache.loss;
    traces[i] = routing_trace(model, cache, s.domain);
  });
  EvalResult out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    out.loss += losses[i] / static_cast<double>(corpus.size());
    out.trace.append(traces[i]);
  }
  return out;
}

inline double evaluate_loss(const ToyLm& model, const Corpus& corpus, std::size_t seq_len) {
  return evaluate(model, corpus, seq_len).loss;
}

}  // namespace moeup
