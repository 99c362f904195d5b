// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures for the test suites. Random inputs come from std::mt19937_64
// so that test data never depends on the library's own generator.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "moeup/checkpoint.hpp"
#include "moeup/config.hpp"
#include "moeup/model.hpp"

namespace moeup::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(eng_);
  }
  double normal(double mu = 0.0, double sigma = 1.0) {
    return std::normal_distribution<double>(mu, sigma)(eng_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(eng_);
  }
  std::vector<double> vec(std::size_t n, double scale = 1.0) {
    std::vector<double> out(n);
    for (double& v : out) v = uniform(-scale, scale);
    return out;
  }
  Matrix matrix(std::size_t rows, std::size_t cols, double scale = 1.0) {
    return Matrix(rows, cols, vec(rows * cols, scale));
  }
  FfnWeights ffn(std::size_t hidden, std::size_t width, double scale = 0.5) {
    return {matrix(hidden, width, scale), matrix(hidden, width, scale), matrix(width, hidden, scale)};
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

inline ModelConfig toy_dense(std::size_t layers = 2, std::size_t hidden = 16,
                             std::size_t inter = 32, std::size_t heads = 2,
                             std::size_t vocab = 11) {
  ModelConfig c;
  c.hidden_size = hidden;
  c.intermediate_size = inter;
  c.num_layers = layers;
  c.num_heads = heads;
  c.num_query_groups = heads;
  c.head_dim = hidden / heads;
  c.vocab_size = vocab;
  c.seq_len = 16;
  return c;
}

inline ModelConfig toy_moe(std::size_t experts = 4, std::size_t k = 2, std::size_t layers = 2,
                           std::size_t hidden = 16, std::size_t inter = 32) {
  ModelConfig c = toy_dense(layers, hidden, inter);
  c.num_experts = experts;
  c.top_k = k;
  return c;
}

// Dense checkpoint with float-representable uniform weights and gains near 1.
inline Checkpoint random_checkpoint(const ModelConfig& config, std::uint64_t seed,
                                    double scale = 0.3) {
  Gen g(seed);
  Checkpoint ck;
  ck.config = config;
  for (const auto& spec : tensor_layout(config)) {
    Matrix m = g.matrix(spec.rows, spec.cols, scale);
    if (spec.name.ends_with("norm"))
      for (double& v : m.values()) v = 1.0 + 0.2 * v;
    round_to_storage(m);
    ck.tensors.emplace(spec.name, std::move(m));
  }
  return ck;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  static int counter = 0;
  auto p = std::filesystem::temp_directory_path() /
           ("moeup_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

// Straight-line SwiGLU for one input, written independently of ffn_forward.
inline std::vector<double> ffn_oracle(const FfnWeights& w, const std::vector<double>& x) {
  const std::size_t h = w.gate.rows(), f = w.gate.cols();
  std::vector<double> y(h, 0.0);
  for (std::size_t j = 0; j < f; ++j) {
    double g = 0, u = 0;
    for (std::size_t d = 0; d < h; ++d) {
      g += x[d] * w.gate(d, j);
      u += x[d] * w.up(d, j);
    }
    const double a = g / (1.0 + std::exp(-g)) * u;
    for (std::size_t d = 0; d < h; ++d) y[d] += a * w.down(j, d);
  }
  return y;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double norm2(const std::vector<double>& a) {
  double s = 0;
  for (double v : a) s += v * v;
  return std::sqrt(s);
}

}  // namespace moeup::testing
