// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#include "moeup/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <numbers>

#include "moeup/corpus.hpp"
#include "moeup/toy_lm.hpp"
#include "moeup/upcycle.hpp"
#include "support.hpp"

namespace moeup {
namespace {

using testing::Gen;

TrainConfig small_train(std::size_t steps = 20) {
  TrainConfig c;
  c.total_steps = steps;
  c.batch_size = 4;
  c.seq_len = 16;
  c.seed = 5;
  return c;
}

ModelConfig corpus_moe() {
  ModelConfig c = testing::toy_moe(4, 2, 2, 16, 32);
  c.vocab_size = kCorpusVocab;
  return c;
}

ModelConfig corpus_dense(std::size_t layers = 2, std::size_t hidden = 16, std::size_t inter = 32) {
  ModelConfig c = testing::toy_dense(layers, hidden, inter);
  c.vocab_size = kCorpusVocab;
  return c;
}

// Trace with random probabilities and random top-k selections.
RoutingTrace random_trace(Gen& g, std::size_t layers, std::size_t n, std::size_t k,
                          std::size_t tokens) {
  RoutingTrace t;
  t.num_layers = layers;
  t.num_experts = n;
  t.top_k = k;
  for (std::size_t l = 0; l < layers; ++l)
    for (std::size_t i = 0; i < tokens; ++i) {
      RoutingRecord r;
      r.layer = l;
      r.token = i;
      std::vector<double> logits = g.vec(n, 2.0);
      r.probs = softmax(logits);
      r.selected = top_k(logits, k);
      t.records.push_back(r);
    }
  return t;
}

RoutingTrace fixed_trace(std::size_t n, std::size_t k, std::size_t tokens,
                         const std::vector<std::size_t>& pick_base) {
  RoutingTrace t;
  t.num_layers = 1;
  t.num_experts = n;
  t.top_k = k;
  for (std::size_t i = 0; i < tokens; ++i) {
    RoutingRecord r;
    r.probs.assign(n, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = (pick_base[i % pick_base.size()] + j) % n;
      r.selected.push_back(e);
      r.probs[e] = 1.0 / static_cast<double>(k);
    }
    t.records.push_back(r);
  }
  return t;
}

TEST(CosineLr, Endpoints) {
  TrainConfig c;
  c.max_lr = 1e-3;
  c.min_lr = 1e-4;
  c.total_steps = 100;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 1e-3);
  EXPECT_NEAR(cosine_lr(50, c), 0.5 * (1e-3 + 1e-4), 1e-12);
  EXPECT_DOUBLE_EQ(cosine_lr(100, c), 1e-4);
}

TEST(CosineLr, WarmupAndTail) {
  TrainConfig c;
  c.max_lr = 2.0;
  c.min_lr = 0.5;
  c.total_steps = 30;
  c.warmup_steps = 4;
  c.tail_steps = 6;
  EXPECT_DOUBLE_EQ(cosine_lr(0, c), 0.5);
  EXPECT_DOUBLE_EQ(cosine_lr(3, c), 2.0);
  EXPECT_DOUBLE_EQ(cosine_lr(4, c), 2.0);
  EXPECT_NEAR(cosine_lr(14, c), 1.25, 1e-12);
  for (std::size_t s = 24; s < 30; ++s) EXPECT_DOUBLE_EQ(cosine_lr(s, c), 0.5);
  double prev = 3.0;
  for (std::size_t s = 4; s <= 24; ++s) {
    EXPECT_LE(cosine_lr(s, c), prev);
    prev = cosine_lr(s, c);
  }
}

TEST(BalanceLoss, UniformRoutingIsOne) {
  RoutingTrace t = fixed_trace(8, 2, 64, {0, 2, 4, 6});
  for (auto& r : t.records) r.probs.assign(8, 1.0 / 8.0);
  EXPECT_NEAR(load_balance_loss(t, BalanceMode::kGlobal), 1.0, 1e-12);
  EXPECT_NEAR(load_balance_loss(t, BalanceMode::kLayerwise), 1.0, 1e-12);
}

TEST(BalanceLoss, CollapsedRoutingIsN) {
  for (std::size_t n : {2u, 4u, 8u, 16u}) {
    RoutingTrace t = fixed_trace(n, 1, 10, {3 % n});
    for (auto& r : t.records) {
      r.probs.assign(n, 0.0);
      r.probs[3 % n] = 1.0;
    }
    EXPECT_NEAR(load_balance_loss(t, BalanceMode::kGlobal), static_cast<double>(n), 1e-12);
  }
}

TEST(BalanceLoss, SingleLayerGlobalEqualsLayerwise) {
  Gen g(11);
  for (int rep = 0; rep < 20; ++rep) {
    RoutingTrace t = random_trace(g, 1, 2 + g.index(7), 1, 1 + g.index(40));
    t.top_k = std::min<std::size_t>(t.top_k, t.num_experts);
    const auto a = balance_terms(t, BalanceMode::kGlobal);
    const auto b = balance_terms(t, BalanceMode::kLayerwise);
    EXPECT_EQ(a.loss, b.loss);
    EXPECT_EQ(a.coeff, b.coeff);
  }
}

TEST(BalanceLoss, LayerwiseIsMeanOfLayers) {
  Gen g(3);
  RoutingTrace t = random_trace(g, 3, 6, 2, 25);
  double mean = 0.0;
  for (std::size_t l = 0; l < 3; ++l) {
    RoutingTrace one;
    one.num_layers = 1;
    one.num_experts = 6;
    one.top_k = 2;
    for (auto r : t.records)
      if (r.layer == l) {
        r.layer = 0;
        one.records.push_back(r);
      }
    mean += load_balance_loss(one, BalanceMode::kLayerwise) / 3.0;
  }
  EXPECT_NEAR(load_balance_loss(t, BalanceMode::kLayerwise), mean, 1e-12);
}

TEST(BalanceLoss, LowerBoundOnAnyTrace) {
  // With probs equal to the assignment shares the loss is n * sum f^2 >= 1.
  Gen g(4);
  for (int rep = 0; rep < 30; ++rep) {
    RoutingTrace t = random_trace(g, 2, 5, 2, 30);
    std::vector<double> f(5, 0.0);
    for (const auto& r : t.records)
      for (auto e : r.selected) f[e] += 1.0 / 120.0;
    for (auto& r : t.records) r.probs = f;
    EXPECT_GE(load_balance_loss(t, BalanceMode::kGlobal), 1.0 - 1e-12);
  }
}

TEST(BalanceLoss, CoefficientsMatchFiniteDifferences) {
  Gen g(21);
  for (BalanceMode mode : {BalanceMode::kGlobal, BalanceMode::kLayerwise}) {
    RoutingTrace t = random_trace(g, 3, 5, 2, 12);
    const auto terms = balance_terms(t, mode);
    const double h = 1e-6;
    for (int probe = 0; probe < 25; ++probe) {
      const std::size_t r = g.index(t.records.size());
      const std::size_t i = g.index(5);
      RoutingTrace up = t, down = t;
      up.records[r].probs[i] += h;
      down.records[r].probs[i] -= h;
      const double fd =
          (load_balance_loss(up, mode) - load_balance_loss(down, mode)) / (2.0 * h);
      EXPECT_NEAR(fd, terms.coeff[t.records[r].layer][i], 1e-7);
    }
  }
}

TEST(BalanceLoss, OffIsZeroAndEmptyThrows) {
  Gen g(2);
  RoutingTrace t = random_trace(g, 2, 4, 2, 5);
  EXPECT_EQ(load_balance_loss(t, BalanceMode::kOff), 0.0);
  EXPECT_TRUE(balance_terms(t, BalanceMode::kOff).coeff.empty());
  RoutingTrace empty;
  empty.num_layers = 1;
  empty.num_experts = 4;
  EXPECT_THROW(load_balance_loss(empty, BalanceMode::kGlobal), ValidationError);
  EXPECT_THROW(load_balance_loss(empty, BalanceMode::kOff), ValidationError);
}

TEST(BalanceMode, NamesRoundTrip) {
  for (BalanceMode m : {BalanceMode::kGlobal, BalanceMode::kLayerwise, BalanceMode::kOff})
    EXPECT_EQ(parse_balance_mode(balance_mode_name(m)), m);
  EXPECT_THROW(parse_balance_mode("sequence"), ValidationError);
}

TEST(TrainConfig, JsonRoundTripAndValidation) {
  TrainConfig c = small_train(77);
  c.balance_mode = BalanceMode::kLayerwise;
  c.warmup_steps = 3;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  Json bad = to_json(c);
  bad["bogus"] = 1;
  EXPECT_THROW(train_config_from_json(bad), ValidationError);
  TrainConfig neg = c;
  neg.max_lr = -1.0;
  EXPECT_THROW(neg.validate(), ValidationError);
  TrainConfig long_warm = c;
  long_warm.warmup_steps = 80;
  EXPECT_THROW(long_warm.validate(), ValidationError);
}

TEST(AdamW, ZeroLearningRateLeavesParametersUnchanged) {
  const auto ck = testing::random_checkpoint(corpus_moe(), 8);
  ToyLm model = from_checkpoint(ck);
  const Corpus corpus = generate_corpus(1, 6, 20);
  TrainConfig c = small_train(3);
  c.max_lr = 0.0;
  c.min_lr = 0.0;
  const TrainResult r = train(model, corpus, c);
  EXPECT_TRUE(bitwise_equal(to_checkpoint(r.model), to_checkpoint(model)));
}

TEST(AdamW, ZeroGradientDecaysByExactFactor) {
  const auto ck = testing::random_checkpoint(corpus_dense(), 9);
  ToyLm model = from_checkpoint(ck);
  const ToyLm before = model;
  const ToyLm zero = zeros_like(model);
  AdamState st = adam_init(model);
  TrainConfig c;
  c.weight_decay = 0.1;
  const double lr = 0.01;
  adamw_step(model, zero, st, lr, c);
  std::vector<const Matrix*> old;
  for_each_parameter(before, [&](const std::string&, const Matrix& w) { old.push_back(&w); });
  std::size_t idx = 0;
  for_each_parameter(model, [&](const std::string& name, const Matrix& w) {
    const double factor = name.ends_with("norm") ? 1.0 : 1.0 - lr * 0.1;
    for (std::size_t i = 0; i < w.values().size(); ++i)
      ASSERT_EQ(w.values()[i], old[idx]->values()[i] * factor) << name;
    ++idx;
  });
}

TEST(AdamW, FirstStepMovesEachCoordinateByLr) {
  // With bias correction the first update is lr * g / (|g| + eps).
  const auto ck = testing::random_checkpoint(corpus_dense(1, 8, 16), 1);
  ToyLm model = from_checkpoint(ck);
  ToyLm grad = zeros_like(model);
  Gen g(6);
  for_each_parameter(grad, [&](const std::string&, Matrix& w) {
    for (double& v : w.values()) v = g.uniform(-1.0, 1.0);
  });
  const ToyLm before = model;
  AdamState st = adam_init(model);
  TrainConfig c;
  c.weight_decay = 0.0;
  adamw_step(model, grad, st, 0.01, c);
  std::vector<const Matrix*> old, gs;
  for_each_parameter(before, [&](const std::string&, const Matrix& w) { old.push_back(&w); });
  for_each_parameter(grad, [&](const std::string&, const Matrix& w) { gs.push_back(&w); });
  std::size_t idx = 0;
  for_each_parameter(model, [&](const std::string&, const Matrix& w) {
    for (std::size_t i = 0; i < w.values().size(); ++i) {
      const double gv = gs[idx]->values()[i];
      const double expect = old[idx]->values()[i] - 0.01 * gv / (std::abs(gv) + 1e-8);
      EXPECT_NEAR(w.values()[i], expect, 1e-12);
    }
    ++idx;
  });
}

TEST(GradClip, ClippedNormIsAtMostMax) {
  Gen g(12);
  const auto ck = testing::random_checkpoint(corpus_moe(), 2);
  for (int rep = 0; rep < 10; ++rep) {
    ToyLm grad = zeros_like(from_checkpoint(ck));
    const double scale = std::pow(10.0, g.uniform(-3.0, 3.0));
    for_each_parameter(grad, [&](const std::string&, Matrix& w) {
      for (double& v : w.values()) v = g.normal(0.0, scale);
    });
    const double before = global_grad_norm(grad);
    const double reported = clip_grad_norm(grad, 1.0);
    EXPECT_EQ(reported, before);
    EXPECT_LE(global_grad_norm(grad), 1.0 + 1e-9);
    if (before <= 1.0) {
      EXPECT_EQ(global_grad_norm(grad), before);
    }
  }
}

TEST(BatchGradient, BalanceTermMatchesFiniteDifference) {
  // d/dw of [lm + c * balance] with selections frozen, probed on router weights.
  const auto ck = testing::random_checkpoint(corpus_moe(), 13);
  const ToyLm model = from_checkpoint(ck);
  const Corpus corpus = generate_corpus(2, 2, 12);
  std::vector<const Sequence*> batch;
  for (const auto& s : corpus.sequences) batch.push_back(&s);
  TrainConfig c = small_train();
  c.balance_coeff = 0.5;
  const BatchResult br = batch_gradient(model, batch, c);

  auto objective = [&](const ToyLm& m) {
    double lm = 0.0;
    RoutingTrace trace;
    for (const auto* s : batch) {
      const LmCache cache = lm_forward_cached(m, training_window(*s, c.seq_len));
      lm += cache.loss / static_cast<double>(batch.size());
      trace.append(routing_trace(m, cache, s->domain));
    }
    return std::pair{lm + c.balance_coeff * load_balance_loss(trace, c.balance_mode), trace};
  };
  const auto base_trace = objective(model).second;
  auto same_selection = [&](const RoutingTrace& t) {
    for (std::size_t i = 0; i < t.records.size(); ++i)
      if (t.records[i].selected != base_trace.records[i].selected) return false;
    return true;
  };
  Gen g(14);
  int checked = 0;
  for (std::size_t layer = 0; layer < 2; ++layer) {
    const std::string name = names::router(layer);
    for (int probe = 0; probe < 8; ++probe) {
      ToyLm up = model, down = model;
      Matrix* wu = nullptr;
      Matrix* wd = nullptr;
      const Matrix* gw = nullptr;
      for_each_parameter(up, [&](const std::string& n, Matrix& w) { if (n == name) wu = &w; });
      for_each_parameter(down, [&](const std::string& n, Matrix& w) { if (n == name) wd = &w; });
      for_each_parameter(br.grad, [&](const std::string& n, const Matrix& w) { if (n == name) gw = &w; });
      ASSERT_TRUE(wu && wd && gw);
      const std::size_t idx = g.index(wu->values().size());
      const double h = 1e-5;
      wu->values()[idx] += h;
      wd->values()[idx] -= h;
      const auto [fu, tu] = objective(up);
      const auto [fd, td] = objective(down);
      if (!same_selection(tu) || !same_selection(td)) continue;
      const double num = (fu - fd) / (2.0 * h);
      const double ana = gw->values()[idx];
      EXPECT_NEAR(ana, num, 1e-6 + 1e-4 * std::abs(num)) << name << "[" << idx << "]";
      ++checked;
    }
  }
  EXPECT_GT(checked, 8);
}

TEST(Train, SameSeedSameCurve) {
  const auto ck = testing::random_checkpoint(corpus_moe(), 4, 0.1);
  const Corpus corpus = generate_corpus(3, 8, 20);
  const TrainConfig c = small_train(6);
  const TrainResult a = train(from_checkpoint(ck), corpus, c);
  const TrainResult b = train(from_checkpoint(ck), corpus, c);
  ASSERT_EQ(a.curve.points.size(), 6u);
  EXPECT_EQ(a.curve.points, b.curve.points);
  EXPECT_TRUE(bitwise_equal(to_checkpoint(a.model), to_checkpoint(b.model)));
}

TEST(Train, IndependentOfThreadCount) {
  const auto ck = testing::random_checkpoint(corpus_moe(), 4, 0.1);
  const Corpus corpus = generate_corpus(3, 8, 20);
  const TrainConfig c = small_train(4);
  const char* prev = std::getenv("MOEUP_THREADS");
  const std::string saved = prev ? prev : "";
  setenv("MOEUP_THREADS", "1", 1);
  const TrainResult one = train(from_checkpoint(ck), corpus, c);
  setenv("MOEUP_THREADS", "3", 1);
  const TrainResult three = train(from_checkpoint(ck), corpus, c);
  if (prev) setenv("MOEUP_THREADS", saved.c_str(), 1); else unsetenv("MOEUP_THREADS");
  EXPECT_EQ(one.curve.points, three.curve.points);
  EXPECT_TRUE(bitwise_equal(to_checkpoint(one.model), to_checkpoint(three.model)));
}

TEST(Train, CurveBookkeeping) {
  const auto ck = testing::random_checkpoint(corpus_moe(), 4, 0.1);
  const Corpus corpus = generate_corpus(3, 8, 20);
  TrainConfig c = small_train(5);
  std::size_t calls = 0;
  const TrainResult r = train(from_checkpoint(ck), corpus, c, [&](const CurvePoint&) { ++calls; });
  EXPECT_EQ(calls, 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& p = r.curve.points[i];
    EXPECT_EQ(p.step, i);
    EXPECT_EQ(p.tokens, (i + 1) * c.batch_size * c.seq_len);
    EXPECT_EQ(p.lr, cosine_lr(i, c));
    EXPECT_NEAR(p.train_loss, p.lm_loss + c.balance_coeff * p.balance_loss, 1e-12);
    EXPECT_GE(p.balance_loss, 1.0 - 1e-9);
  }
}

TEST(Train, BalanceOffContributesNothing) {
  const auto ck = testing::random_checkpoint(corpus_moe(), 4, 0.1);
  const Corpus corpus = generate_corpus(3, 8, 20);
  TrainConfig off = small_train(3);
  off.balance_mode = BalanceMode::kOff;
  TrainConfig zero = small_train(3);
  zero.balance_coeff = 0.0;
  const TrainResult a = train(from_checkpoint(ck), corpus, off);
  const TrainResult b = train(from_checkpoint(ck), corpus, zero);
  for (const auto& p : a.curve.points) {
    EXPECT_EQ(p.balance_loss, 0.0);
    EXPECT_EQ(p.train_loss, p.lm_loss);
  }
  EXPECT_TRUE(bitwise_equal(to_checkpoint(a.model), to_checkpoint(b.model)));
}

TEST(Train, LossDecreasesOnToyCorpus) {
  const ToyLm model = from_checkpoint(from_scratch(corpus_moe(), 7));
  const Corpus corpus = generate_corpus(4, 30, 24);
  TrainConfig c;
  c.total_steps = 300;
  c.batch_size = 4;
  c.seq_len = 16;
  c.seed = 1;
  const double before = evaluate_loss(model, corpus, c.seq_len);
  const TrainResult r = train(model, corpus, c);
  const double after = evaluate_loss(r.model, corpus, c.seq_len);
  EXPECT_NEAR(before, std::log(64.0), 0.1);
  EXPECT_LT(after, before - 1.0);
}

TEST(Train, NonFiniteLossThrows) {
  auto ck = testing::random_checkpoint(corpus_dense(), 4, 0.1);
  for (double& v : ck.tensors.at(names::kHead).values()) v = std::numeric_limits<double>::infinity();
  const Corpus corpus = generate_corpus(3, 2, 10);
  EXPECT_THROW(train(from_checkpoint(ck), corpus, small_train(2)), TrainingError);
}

TEST(Train, RejectsEmptyCorpusAndShortSequences) {
  const auto ck = testing::random_checkpoint(corpus_dense(), 4, 0.1);
  EXPECT_THROW(train(from_checkpoint(ck), Corpus{}, small_train(2)), ValidationError);
  Corpus tiny;
  tiny.sequences.push_back({"lang_a", {3}});
  EXPECT_THROW(train(from_checkpoint(ck), tiny, small_train(2)), ValidationError);
}

TEST(Curve, JsonlRoundTrip) {
  LossCurve c;
  Gen g(5);
  for (std::size_t i = 0; i < 10; ++i)
    c.points.push_back({i, 100 * (i + 1), g.uniform(1, 4), g.uniform(1, 4), g.uniform(1, 2), 1e-3});
  const auto path = testing::temp_dir("curve") / "c.jsonl";
  write_curve(c, path);
  EXPECT_EQ(read_curve(path).points, c.points);
}

TEST(Curve, RejectsNonIncreasingTokens) {
  const auto path = testing::temp_dir("curve_bad") / "c.jsonl";
  LossCurve c;
  c.points.push_back({0, 100, 1, 1, 0, 0});
  c.points.push_back({1, 100, 1, 1, 0, 0});
  write_curve(c, path);
  EXPECT_THROW(read_curve(path), ValidationError);
}

TEST(Evaluate, DenseLossMatchesForwardMean) {
  const auto ck = testing::random_checkpoint(corpus_dense(), 4, 0.1);
  const ToyLm model = from_checkpoint(ck);
  const Corpus corpus = generate_corpus(9, 3, 14);
  double mean = 0.0;
  for (const auto& s : corpus.sequences)
    mean += lm_forward(model, training_window(s, 10)).loss / static_cast<double>(corpus.size());
  const EvalResult r = evaluate(model, corpus, 10);
  EXPECT_NEAR(r.loss, mean, 1e-12);
  EXPECT_TRUE(r.trace.empty());
}

}  // namespace
}  // namespace moeup
