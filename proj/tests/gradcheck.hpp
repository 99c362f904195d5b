// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Central finite differences against lm_backward.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moeup/toy_lm.hpp"
#include "support.hpp"

namespace moeup::testing {

// Objective: next-token loss plus sum_l sum_t sum_i coeff[l][i] * p[l,t,i].
inline double objective(const ToyLm& m, const std::vector<std::uint32_t>& tokens,
                        const std::vector<std::vector<double>>& coeff,
                        std::vector<std::vector<std::size_t>>* selections = nullptr) {
  const LmCache c = lm_forward_cached(m, tokens);
  double j = c.loss;
  for (std::size_t l = 0; l < c.layers.size() && l < coeff.size(); ++l)
    for (const auto& out : c.layers[l].moe)
      for (std::size_t i = 0; i < coeff[l].size(); ++i) j += coeff[l][i] * out.probs[i];
  if (selections) {
    selections->clear();
    for (const auto& lc : c.layers)
      for (const auto& out : lc.moe) selections->push_back(out.selected);
  }
  return j;
}

inline ToyLm random_lm(const ModelConfig& config, std::uint64_t seed, double scale = 0.3) {
  return from_checkpoint(random_checkpoint(config, seed, scale));
}

struct GradCheckResult {
  std::string name;
  std::size_t index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

// Checks `count` randomly chosen scalar parameters. Parameters whose
// perturbation flips a top-k selection are skipped and redrawn.
inline std::vector<GradCheckResult> grad_check(const ModelConfig& config, std::uint64_t seed,
                                               std::size_t count, bool with_aux,
                                               double h = 1e-4) {
  Gen g(seed);
  ToyLm model = random_lm(config, seed);
  std::vector<std::uint32_t> tokens(12);
  for (auto& t : tokens) t = static_cast<std::uint32_t>(g.index(config.vocab_size));
  std::vector<std::vector<double>> coeff;
  if (with_aux && config.is_moe())
    for (std::size_t l = 0; l < config.num_layers; ++l) coeff.push_back(g.vec(config.routed_experts(), 0.5));

  const LmCache cache = lm_forward_cached(model, tokens);
  ToyLm grad = zeros_like(model);
  LmBackwardOptions opts;
  opts.prob_coeff = coeff;
  lm_backward(model, cache, opts, grad);

  std::vector<std::pair<std::string, Matrix*>> params, grads;
  for_each_parameter(model, [&](const std::string& n, Matrix& w) { params.emplace_back(n, &w); });
  for_each_parameter(grad, [&](const std::string& n, Matrix& w) { grads.emplace_back(n, &w); });

  std::vector<std::vector<std::size_t>> base_sel;
  objective(model, tokens, coeff, &base_sel);

  std::vector<GradCheckResult> out;
  std::size_t attempts = 0;
  while (out.size() < count && attempts++ < 50 * count) {
    const std::size_t p = g.index(params.size());
    Matrix& w = *params[p].second;
    const std::size_t i = g.index(w.size());
    const double orig = w.values()[i];
    std::vector<std::vector<std::size_t>> sel_plus, sel_minus;
    w.values()[i] = orig + h;
    const double fp = objective(model, tokens, coeff, &sel_plus);
    w.values()[i] = orig - h;
    const double fm = objective(model, tokens, coeff, &sel_minus);
    w.values()[i] = orig;
    if (sel_plus != base_sel || sel_minus != base_sel) continue;
    GradCheckResult r;
    r.name = params[p].first;
    r.index = i;
    r.numeric = (fp - fm) / (2 * h);
    r.analytic = grads[p].second->values()[i];
    r.rel_error = std::abs(r.analytic - r.numeric) /
                  std::max({std::abs(r.analytic), std::abs(r.numeric), 1e-7});
    out.push_back(r);
  }
  return out;
}

}  // namespace moeup::testing
