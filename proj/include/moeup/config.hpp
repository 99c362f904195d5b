// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>

#include <json.hpp>

#include "moeup/error.hpp"

namespace moeup {

using Json = nlohmann::json;

// Architectural hyperparameters shared by dense and MoE models.
//
// For fine-grained MoE (granularity m > 1) each of the `num_experts` parent
// slots is split into m experts of width intermediate_size / m; the first
// `shared_experts` of those m * num_experts slots are merged into one
// always-active shared FFN and the rest are routed. `top_k` counts routed
// experts selected per token.
struct ModelConfig {
  std::size_t hidden_size = 0;        // d_h
  std::size_t intermediate_size = 0;  // d_f
  std::size_t num_layers = 0;         // n_l
  std::size_t num_heads = 0;          // n_h
  std::size_t num_query_groups = 0;   // n_q (key/value heads)
  std::size_t head_dim = 0;           // d_k
  std::size_t vocab_size = 0;         // v
  std::size_t num_experts = 0;        // n, 0 = dense
  std::size_t top_k = 0;              // k
  std::size_t granularity = 1;        // m
  std::size_t shared_experts = 0;     // k_s
  std::size_t seq_len = 4096;         // s, used by FLOPs accounting

  bool is_moe() const { return num_experts > 0; }
  std::size_t routed_experts() const {
    return is_moe() ? granularity * num_experts - shared_experts : 0;
  }
  std::size_t expert_size() const { return intermediate_size / granularity; }
  std::size_t shared_size() const { return expert_size() * shared_experts; }
  std::size_t q_width() const { return num_heads * head_dim; }
  std::size_t kv_width() const { return num_query_groups * head_dim; }

  // Same non-FFN architecture (everything an upcycle copies must line up).
  bool same_trunk(const ModelConfig& o) const {
    return hidden_size == o.hidden_size && intermediate_size == o.intermediate_size &&
           num_layers == o.num_layers && num_heads == o.num_heads &&
           num_query_groups == o.num_query_groups && head_dim == o.head_dim &&
           vocab_size == o.vocab_size;
  }

  void validate() const {
    require(hidden_size > 0, "hidden_size must be positive");
    require(intermediate_size > 0, "intermediate_size must be positive");
    require(num_heads > 0 && head_dim > 0, "num_heads and head_dim must be positive");
    require(vocab_size > 0, "vocab_size must be positive");
    require(hidden_size == num_heads * head_dim, "hidden_size must equal num_heads * head_dim");
    require(num_query_groups > 0 && num_heads % num_query_groups == 0,
            "num_query_groups must divide num_heads");
    require(granularity >= 1, "granularity must be at least 1");
    if (is_moe()) {
      require(intermediate_size % granularity == 0,
              "intermediate_size must be divisible by granularity");
      require(shared_experts < granularity * num_experts,
              "shared_experts must be smaller than granularity * num_experts");
      require(top_k >= 1 && top_k <= routed_experts(),
              "top_k must be in [1, granularity * num_experts - shared_experts]");
    } else {
      require(top_k == 0 && granularity == 1 && shared_experts == 0,
              "dense config (num_experts = 0) must have top_k = 0, granularity = 1, "
              "shared_experts = 0");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

inline Json to_json(const ModelConfig& c) {
  return Json{{"hidden_size", c.hidden_size},
              {"intermediate_size", c.intermediate_size},
              {"num_layers", c.num_layers},
              {"num_heads", c.num_heads},
              {"num_query_groups", c.num_query_groups},
              {"head_dim", c.head_dim},
              {"vocab_size", c.vocab_size},
              {"num_experts", c.num_experts},
              {"top_k", c.top_k},
              {"granularity", c.granularity},
              {"shared_experts", c.shared_experts},
              {"seq_len", c.seq_len}};
}

namespace detail {

inline std::size_t json_count(const Json& j, const char* key) {
  const Json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw ValidationError(std::string("field '") + key + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

inline void reject_unknown_keys(const Json& j, const std::set<std::string>& known,
                                const std::string& what) {
  if (!j.is_object()) throw ValidationError(what + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw ValidationError("unknown " + what + " field '" + key + "'");
}

}  // namespace detail

// Strict parse: unknown keys are rejected, optional keys keep their defaults.
// head_dim may be omitted and is then hidden_size / num_heads; num_query_groups
// defaults to num_heads.
inline ModelConfig model_config_from_json(const Json& j) {
  static const std::set<std::string> kKnown = {
      "hidden_size", "intermediate_size", "num_layers",  "num_heads",
      "num_query_groups", "head_dim",      "vocab_size",  "num_experts",
      "top_k",       "granularity",       "shared_experts", "seq_len"};
  detail::reject_unknown_keys(j, kKnown, "model config");
  ModelConfig c;
  try {
    c.hidden_size = detail::json_count(j, "hidden_size");
    c.intermediate_size = detail::json_count(j, "intermediate_size");
    c.num_layers = detail::json_count(j, "num_layers");
    c.num_heads = detail::json_count(j, "num_heads");
    c.vocab_size = detail::json_count(j, "vocab_size");
    c.num_query_groups =
        j.contains("num_query_groups") ? detail::json_count(j, "num_query_groups") : c.num_heads;
    c.head_dim = j.contains("head_dim") ? detail::json_count(j, "head_dim")
                                        : (c.num_heads ? c.hidden_size / c.num_heads : 0);
    if (j.contains("num_experts")) c.num_experts = detail::json_count(j, "num_experts");
    if (j.contains("top_k")) c.top_k = detail::json_count(j, "top_k");
    if (j.contains("granularity")) c.granularity = detail::json_count(j, "granularity");
    if (j.contains("shared_experts")) c.shared_experts = detail::json_count(j, "shared_experts");
    if (j.contains("seq_len")) c.seq_len = detail::json_count(j, "seq_len");
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace moeup
