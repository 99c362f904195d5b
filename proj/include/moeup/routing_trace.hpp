// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace moeup {

// One routing decision: MoE layer `layer` processing token position `token`.
struct RoutingRecord {
  std::size_t layer = 0;
  std::size_t token = 0;
  std::string domain;
  std::vector<std::size_t> selected;  // k experts, highest logit first
  std::vector<double> gates;          // aligned with selected, sums to 1
  std::vector<double> probs;          // full router softmax over n experts
};

struct RoutingTrace {
  std::size_t num_layers = 0;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::vector<RoutingRecord> records;

  bool empty() const { return records.empty(); }

  void append(const RoutingTrace& other) {
    if (records.empty() && num_layers == 0) {
      num_layers = other.num_layers;
      num_experts = other.num_experts;
      top_k = other.top_k;
    }
    records.insert(records.end(), other.records.begin(), other.records.end());
  }
};

}  // namespace moeup
