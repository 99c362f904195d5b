// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// SwiGLU feed-forward blocks and top-k routed MoE layers, with the backward
// pieces the toy language model needs.

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moeup/numerics.hpp"

namespace moeup {

// gate, up: hidden x width; down: width x hidden. No biases.
struct FfnWeights {
  Matrix gate;
  Matrix up;
  Matrix down;

  std::size_t hidden() const { return gate.rows(); }
  std::size_t width() const { return gate.cols(); }
  bool empty() const { return gate.empty(); }

  void validate() const {
    require(up.same_shape(gate), "ffn: up and gate shapes differ");
    require(down.rows() == gate.cols() && down.cols() == gate.rows(),
            "ffn: down must be width x hidden");
  }
};

struct MoeLayerWeights {
  Matrix router;                    // hidden x n
  std::vector<FfnWeights> experts;  // n routed experts
  FfnWeights shared;                // always-active block; empty when absent

  std::size_t num_experts() const { return experts.size(); }

  void validate() const {
    require(!experts.empty(), "moe layer has no experts");
    require(router.cols() == experts.size(), "router column count must equal expert count");
    for (const auto& e : experts) {
      e.validate();
      require(e.hidden() == router.rows(), "expert hidden size differs from router");
    }
    if (!shared.empty()) shared.validate();
  }
};

// Intermediate activations of one FFN evaluation.
struct FfnCache {
  std::vector<double> gate_pre;  // x^T W_gate
  std::vector<double> up_pre;    // x^T W_up
  std::vector<double> act;       // Swish(gate_pre) * up_pre
};

inline std::vector<double> ffn_forward(const FfnWeights& w, std::span<const double> x,
                                       FfnCache* cache = nullptr) {
  require(x.size() == w.hidden(), "ffn_forward: input length " + std::to_string(x.size()) +
                                      " != hidden size " + std::to_string(w.hidden()));
  auto gate_pre = vecmat(x, w.gate);
  auto up_pre = vecmat(x, w.up);
  std::vector<double> act(gate_pre.size());
  for (std::size_t j = 0; j < act.size(); ++j) act[j] = swish(gate_pre[j]) * up_pre[j];
  auto out = vecmat(act, w.down);
  if (cache) *cache = {std::move(gate_pre), std::move(up_pre), std::move(act)};
  return out;
}

// Accumulates parameter gradients into `grad` and the input gradient into `dx`.
inline void ffn_backward(const FfnWeights& w, std::span<const double> x, const FfnCache& cache,
                         std::span<const double> dout, FfnWeights& grad, std::span<double> dx,
                         double scale = 1.0) {
  const std::size_t width = w.width();
  outer_acc(cache.act, dout, grad.down, scale);
  std::vector<double> dact(width, 0.0);
  vecmat_t_acc(dout, w.down, dact);
  std::vector<double> dgate(width), dup(width);
  for (std::size_t j = 0; j < width; ++j) {
    dact[j] *= scale;
    dup[j] = dact[j] * swish(cache.gate_pre[j]);
    dgate[j] = dact[j] * cache.up_pre[j] * swish_grad(cache.gate_pre[j]);
  }
  outer_acc(x, dgate, grad.gate);
  outer_acc(x, dup, grad.up);
  vecmat_t_acc(dgate, w.gate, dx);
  vecmat_t_acc(dup, w.up, dx);
}

struct MoeOutput {
  std::vector<double> y;
  std::vector<double> gates;          // length n, zero outside `selected`
  std::vector<std::size_t> selected;  // top-k, highest logit first
  std::vector<double> logits;         // x^T W_router
  std::vector<double> probs;          // softmax over all n logits
};

struct MoeCache {
  std::vector<FfnCache> expert_caches;      // aligned with selected
  std::vector<std::vector<double>> outputs;  // expert outputs, aligned with selected
  FfnCache shared_cache;
};

// Token-choice top-k routing: softmax over the selected logits only, no
// capacity limit. The shared block (if any) is added ungated.
inline MoeOutput moe_forward(const MoeLayerWeights& w, std::span<const double> x, std::size_t k,
                             MoeCache* cache = nullptr) {
  require(x.size() == w.router.rows(), "moe_forward: input length mismatch");
  require(k >= 1 && k <= w.num_experts(), "moe_forward: k must be in [1, n]");
  MoeOutput out;
  out.logits = vecmat(x, w.router);
  out.probs = softmax(out.logits);
  out.selected = top_k(out.logits, k);
  std::vector<double> sel_logits(k);
  for (std::size_t i = 0; i < k; ++i) sel_logits[i] = out.logits[out.selected[i]];
  const auto sel_gates = softmax(sel_logits);
  out.gates.assign(w.num_experts(), 0.0);
  for (std::size_t i = 0; i < k; ++i) out.gates[out.selected[i]] = sel_gates[i];

  out.y.assign(x.size(), 0.0);
  if (cache) {
    cache->expert_caches.assign(k, {});
    cache->outputs.assign(k, {});
  }
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t e = out.selected[i];
    auto expert_out =
        ffn_forward(w.experts[e], x, cache ? &cache->expert_caches[i] : nullptr);
    for (std::size_t d = 0; d < x.size(); ++d) out.y[d] += sel_gates[i] * expert_out[d];
    if (cache) cache->outputs[i] = std::move(expert_out);
  }
  if (!w.shared.empty()) {
    const auto shared_out = ffn_forward(w.shared, x, cache ? &cache->shared_cache : nullptr);
    for (std::size_t d = 0; d < x.size(); ++d) out.y[d] += shared_out[d];
  }
  return out;
}

// Backward through one token's MoE layer. `prob_coeff` (length n, may be
// empty) is dL/dprobs from an auxiliary loss on the full router softmax.
inline void moe_backward(const MoeLayerWeights& w, std::span<const double> x,
                         const MoeOutput& fwd, const MoeCache& cache,
                         std::span<const double> dy, std::span<const double> prob_coeff,
                         MoeLayerWeights& grad, std::span<double> dx) {
  const std::size_t n = w.num_experts();
  const std::size_t k = fwd.selected.size();
  std::vector<double> dlogits(n, 0.0);

  // Gate path: y = sum_i g_i f_i with g = softmax(selected logits).
  std::vector<double> dgate(k);
  double weighted = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const auto& f = cache.outputs[i];
    double acc = 0.0;
    for (std::size_t d = 0; d < dy.size(); ++d) acc += dy[d] * f[d];
    dgate[i] = acc;
    weighted += fwd.gates[fwd.selected[i]] * acc;
  }
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t e = fwd.selected[i];
    dlogits[e] += fwd.gates[e] * (dgate[i] - weighted);
    ffn_backward(w.experts[e], x, cache.expert_caches[i], dy, grad.experts[e], dx,
                 fwd.gates[e]);
  }
  if (!prob_coeff.empty()) {
    double mean_coeff = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean_coeff += fwd.probs[i] * prob_coeff[i];
    for (std::size_t i = 0; i < n; ++i) dlogits[i] += fwd.probs[i] * (prob_coeff[i] - mean_coeff);
  }
  outer_acc(x, dlogits, grad.router);
  vecmat_t_acc(dlogits, w.router, dx);
  if (!w.shared.empty()) ffn_backward(w.shared, x, cache.shared_cache, dy, grad.shared, dx);
}

// SwiGLU output restricted to the intermediate dimensions where mask is true.
// SwiGLU is a sum over intermediate dimensions, so complementary masks add up
// to the full output.
inline std::vector<double> ffn_partial(const FfnWeights& w, std::span<const double> x,
                                       const std::vector<bool>& mask) {
  require(mask.size() == w.width(), "ffn_partial: mask length != expert width");
  std::vector<double> out(w.hidden(), 0.0);
  for (std::size_t j = 0; j < w.width(); ++j) {
    if (!mask[j]) continue;
    double g = 0.0, u = 0.0;
    for (std::size_t d = 0; d < w.hidden(); ++d) {
      g += x[d] * w.gate(d, j);
      u += x[d] * w.up(d, j);
    }
    const double a = swish(g) * u;
    for (std::size_t d = 0; d < w.hidden(); ++d) out[d] += a * w.down(j, d);
  }
  return out;
}

// Both sides of the common/retained/diverse decomposition of an MoE output:
//   lhs = sum_i g_i FFN_i(x)
//   rhs = FFN_common(x) + sum_i g_i [FFN_retained_i(x) - FFN_common(x) + FFN_diverse_i(x)]
// FFN_common uses the dimensions retained by every selected expert.
struct MoeDecomposition {
  std::vector<double> lhs;
  std::vector<double> rhs;
  std::vector<double> common;
  std::vector<std::vector<double>> retained;  // aligned with selected
  std::vector<std::vector<double>> diverse;   // aligned with selected
  std::vector<std::size_t> selected;
  std::vector<double> gates;  // length n
  std::size_t common_dims = 0;
};

inline MoeDecomposition decompose_moe_output(const MoeLayerWeights& w, std::span<const double> x,
                                             std::size_t k,
                                             const std::vector<std::vector<bool>>& retained_masks) {
  w.validate();
  require(w.shared.empty(), "decompose_moe_output: shared experts are not supported");
  require(retained_masks.size() == w.num_experts(),
          "masks inconsistent with expert weights: one mask per expert required");
  const std::size_t width = w.experts.front().width();
  for (std::size_t e = 0; e < w.num_experts(); ++e)
    require(retained_masks[e].size() == w.experts[e].width() && w.experts[e].width() == width,
            "masks inconsistent with expert weights: mask length != expert width");

  const MoeOutput fwd = moe_forward(w, x, k);
  MoeDecomposition out;
  out.lhs = fwd.y;
  out.selected = fwd.selected;
  out.gates = fwd.gates;

  std::vector<bool> common(width, true);
  for (std::size_t e : fwd.selected)
    for (std::size_t j = 0; j < width; ++j) common[j] = common[j] && retained_masks[e][j];
  for (bool c : common) out.common_dims += c ? 1 : 0;

  // Commonly retained dimensions must hold the same parent weights everywhere.
  const FfnWeights& ref = w.experts[fwd.selected.front()];
  for (std::size_t e : fwd.selected) {
    const FfnWeights& ex = w.experts[e];
    for (std::size_t j = 0; j < width; ++j) {
      if (!common[j]) continue;
      for (std::size_t d = 0; d < ex.hidden(); ++d) {
        if (ex.gate(d, j) != ref.gate(d, j) || ex.up(d, j) != ref.up(d, j) ||
            ex.down(j, d) != ref.down(j, d))
          throw ValidationError(
              "masks inconsistent with expert weights: retained dimension " + std::to_string(j) +
              " differs between selected experts");
      }
    }
  }

  out.common = ffn_partial(ref, x, common);
  out.rhs = out.common;
  for (std::size_t e : fwd.selected) {
    std::vector<bool> dropped(width);
    for (std::size_t j = 0; j < width; ++j) dropped[j] = !retained_masks[e][j];
    auto ret = ffn_partial(w.experts[e], x, retained_masks[e]);
    auto div = ffn_partial(w.experts[e], x, dropped);
    for (std::size_t d = 0; d < out.rhs.size(); ++d)
      out.rhs[d] += fwd.gates[e] * (ret[d] - out.common[d] + div[d]);
    out.retained.push_back(std::move(ret));
    out.diverse.push_back(std::move(div));
  }
  return out;
}

}  // namespace moeup
