// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Parameter counts (total / active) and forward FLOPs per the usual
// matmul convention: an (m x k) @ (k x n) product costs 2mkn.

#pragma once

#include <cstdint>

#include "moeup/config.hpp"

namespace moeup {

struct ParamBreakdown {
  std::uint64_t embeddings = 0;
  std::uint64_t attention = 0;       // all layers
  std::uint64_t ffn_or_experts = 0;  // dense FFNs, or routed + shared experts
  std::uint64_t router = 0;
  std::uint64_t norms = 0;
  std::uint64_t output_head = 0;
  std::uint64_t total = 0;
  std::uint64_t active = 0;  // touched per token: everything but unselected experts
};

inline ParamBreakdown count_params(const ModelConfig& c) {
  c.validate();
  const std::uint64_t h = c.hidden_size, layers = c.num_layers;
  ParamBreakdown p;
  p.embeddings = c.vocab_size * h;
  p.output_head = h * c.vocab_size;
  p.norms = 2 * layers * h + h;
  p.attention = layers * (2 * h * c.q_width() + 2 * h * c.kv_width());
  std::uint64_t inactive = 0;
  if (c.is_moe()) {
    const std::uint64_t expert = 3 * h * c.expert_size();
    p.ffn_or_experts = layers * (c.routed_experts() * expert + 3 * h * c.shared_size());
    p.router = layers * h * c.routed_experts();
    inactive = layers * (c.routed_experts() - c.top_k) * expert;
  } else {
    p.ffn_or_experts = layers * 3 * h * c.intermediate_size;
  }
  p.total = p.embeddings + p.attention + p.ffn_or_experts + p.router + p.norms + p.output_head;
  p.active = p.total - inactive;
  return p;
}

inline Json to_json(const ParamBreakdown& p) {
  return Json{{"embeddings", p.embeddings}, {"attention", p.attention},
              {"ffn_or_experts", p.ffn_or_experts}, {"router", p.router},
              {"norms", p.norms}, {"output_head", p.output_head},
              {"total", p.total}, {"active", p.active}};
}

struct AttentionFlops {
  double kv_proj = 0;
  double q_proj = 0;
  double qk_logits = 0;
  double attn_matrix = 0;
  double softmax_value = 0;

  double sum() const { return kv_proj + q_proj + qk_logits + attn_matrix + softmax_value; }
};

// Forward FLOPs for one sequence of `tokens` positions.
struct FlopsBreakdown {
  double tokens = 0;
  double num_layers = 0;
  double embeddings = 0;
  AttentionFlops attention;  // per layer
  double ffn = 0;            // per layer
  double final_logits = 0;
  double total_forward = 0;
  double training_per_token = 0;  // 3 x forward per token; 0 when tokens = 0
};

inline FlopsBreakdown flops_forward(const ModelConfig& c, std::uint64_t tokens) {
  c.validate();
  const double s = static_cast<double>(tokens);
  const double dh = static_cast<double>(c.hidden_size);
  const double dk = static_cast<double>(c.head_dim);
  const double nh = static_cast<double>(c.num_heads);
  const double nq = static_cast<double>(c.num_query_groups);
  const double v = static_cast<double>(c.vocab_size);

  FlopsBreakdown f;
  f.tokens = s;
  f.num_layers = static_cast<double>(c.num_layers);
  f.embeddings = 2 * s * v * dh;
  f.attention.kv_proj = 4 * s * dh * dk * nq;
  f.attention.q_proj = 2 * s * dh * dk * nh;
  f.attention.qk_logits = 2 * s * s * dk * nh;
  f.attention.attn_matrix = 2 * s * s * dk * nh;
  f.attention.softmax_value = 2 * s * dk * nh * dh;
  // SwiGLU: gate and up (4 s d_h w) plus down (2 s w d_h), once per active expert.
  double width = static_cast<double>(c.intermediate_size);
  double active = 1;
  if (c.is_moe()) {
    width = static_cast<double>(c.expert_size());
    active = static_cast<double>(c.top_k + c.shared_experts);
  }
  f.ffn = active * (4 * s * dh * width + 2 * s * width * dh);
  f.final_logits = 2 * s * dh * v;
  f.total_forward = f.embeddings + f.num_layers * (f.attention.sum() + f.ffn) + f.final_logits;
  f.training_per_token = tokens == 0 ? 0.0 : 3.0 * f.total_forward / s;
  return f;
}

// 3 x forward FLOPs per token (backward ~ 2x forward) x total tokens, with
// the per-token cost evaluated at the configured sequence length.
inline double training_flops(const ModelConfig& c, double total_tokens) {
  require(total_tokens >= 0.0, "total_tokens must be non-negative");
  require(c.seq_len > 0, "seq_len must be positive for training FLOPs");
  return flops_forward(c, c.seq_len).training_per_token * total_tokens;
}

inline Json to_json(const FlopsBreakdown& f) {
  return Json{{"tokens", f.tokens},
              {"num_layers", f.num_layers},
              {"embeddings", f.embeddings},
              {"attention_per_layer",
               {{"kv_proj", f.attention.kv_proj},
                {"q_proj", f.attention.q_proj},
                {"qk_logits", f.attention.qk_logits},
                {"attn_matrix", f.attention.attn_matrix},
                {"softmax_value", f.attention.softmax_value}}},
              {"ffn_per_layer", f.ffn},
              {"final_logits", f.final_logits},
              {"total_forward", f.total_forward},
              {"training_per_token", f.training_per_token}};
}

}  // namespace moeup
