// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic numeric substrate: row-major matrices, path-derived random
// streams, normal/uniform sampling, subset sampling, softmax and top-k.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moeup/error.hpp"

namespace moeup {

// ---------------------------------------------------------------------------
// Matrix

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "matrix data length does not match shape");
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Compares the object representation, so 0.0 and -0.0 differ and equal NaN
// payloads compare equal.
inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.same_shape(b) &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

inline std::string shape_string(const Matrix& m) {
  return "[" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + "]";
}

// out += a * b
inline void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.cols() == b.rows() && out.rows() == a.rows() && out.cols() == b.cols(),
          "matmul shape mismatch: " + shape_string(a) + " * " + shape_string(b));
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* o = out.data() + i * n;
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += aik * brow[j];
    }
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

// out += a^T * b
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(),
          "matmul_tn shape mismatch: " + shape_string(a) + "^T * " + shape_string(b));
  const std::size_t n = b.cols();
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const double* brow = b.data() + r * n;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ari = a(r, i);
      if (ari == 0.0) continue;
      double* o = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += ari * brow[j];
    }
  }
}

// out += a * b^T
inline void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  require(a.cols() == b.cols() && out.rows() == a.rows() && out.cols() == b.rows(),
          "matmul_nt shape mismatch: " + shape_string(a) + " * " + shape_string(b) + "^T");
  const std::size_t kk = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* arow = a.data() + i * kk;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double* brow = b.data() + j * kk;
      double acc = 0.0;
      for (std::size_t k = 0; k < kk; ++k) acc += arow[k] * brow[k];
      out(i, j) += acc;
    }
  }
}

// x^T W for a row vector x.
inline std::vector<double> vecmat(std::span<const double> x, const Matrix& w) {
  require(x.size() == w.rows(), "vecmat shape mismatch: len " + std::to_string(x.size()) +
                                    " vs " + shape_string(w));
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t k = 0; k < w.rows(); ++k) {
    const double xk = x[k];
    if (xk == 0.0) continue;
    const double* wrow = w.data() + k * w.cols();
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += xk * wrow[j];
  }
  return out;
}

// out += x^T W^T, i.e. out[i] += sum_j W(i, j) * x[j].
inline void vecmat_t_acc(std::span<const double> x, const Matrix& w, std::span<double> out) {
  require(x.size() == w.cols() && out.size() == w.rows(), "vecmat_t shape mismatch");
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const double* wrow = w.data() + i * w.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < w.cols(); ++j) acc += wrow[j] * x[j];
    out[i] += acc;
  }
}

// out += scale * x y^T
inline void outer_acc(std::span<const double> x, std::span<const double> y, Matrix& out,
                      double scale = 1.0) {
  require(out.rows() == x.size() && out.cols() == y.size(), "outer product shape mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = scale * x[i];
    if (xi == 0.0) continue;
    double* o = out.data() + i * out.cols();
    for (std::size_t j = 0; j < y.size(); ++j) o[j] += xi * y[j];
  }
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
inline double swish(double z) { return z * sigmoid(z); }
inline double swish_grad(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

// ---------------------------------------------------------------------------
// Hashing

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

inline std::uint64_t fnv1a64(std::span<const std::byte> bytes, std::uint64_t h = kFnvOffset) {
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(std::as_bytes(std::span<const char>(s.data(), s.size())), h);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random streams

// SplitMix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// A SplitMix64 generator whose starting state is derived from a seed and a
// path of integers (layer, expert, purpose, ...). Streams with distinct paths
// are independent for practical purposes; equal (seed, path) pairs replay the
// same sequence.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {})
      : RngStream(seed, std::span<const std::uint64_t>(path.begin(), path.size())) {}

  RngStream(std::uint64_t seed, std::span<const std::uint64_t> path)
      : seed_(seed), path_(path.begin(), path.end()) {
    std::uint64_t s = mix64(seed ^ 0x6a09e667f3bcc909ULL);
    s = mix64(s + path_.size());
    for (std::uint64_t p : path_) s = mix64(s ^ mix64(p + 0x9e3779b97f4a7c15ULL));
    state_ = s;
  }

  std::uint64_t seed() const { return seed_; }
  const std::vector<std::uint64_t>& path() const { return path_; }

  RngStream child(std::uint64_t index) const {
    std::vector<std::uint64_t> p = path_;
    p.push_back(index);
    return RngStream(seed_, p);
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in (0, 1].
  double next_open_double() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Unbiased integer in [0, bound) by rejection.
  std::uint64_t next_below(std::uint64_t bound) {
    require(bound > 0, "next_below requires a positive bound");
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % bound;
    }
  }

 private:
  std::uint64_t seed_ = 0;
  std::vector<std::uint64_t> path_;
  std::uint64_t state_ = 0;
};

struct NormalParams {
  double mu = 0.0;
  double sigma = 0.0;

  void validate() const {
    require(std::isfinite(mu) && std::isfinite(sigma), "normal parameters must be finite");
    require(sigma >= 0.0, "normal sigma must be non-negative");
  }
};

// Box-Muller. Each pair of outputs consumes exactly two draws: u1 in (0,1]
// for the radius, u2 in [0,1) for the angle; an odd count discards the sine
// half of the final pair.
inline std::vector<double> sample_normal(RngStream& stream, NormalParams params,
                                         std::size_t count) {
  params.validate();
  std::vector<double> out(count);
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < count; i += 2) {
    const double u1 = stream.next_open_double();
    const double u2 = stream.next_double();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    out[i] = params.mu + params.sigma * (radius * std::cos(kTwoPi * u2));
    if (i + 1 < count) out[i + 1] = params.mu + params.sigma * (radius * std::sin(kTwoPi * u2));
  }
  return out;
}

// Uniform on [lo, hi].
inline std::vector<double> sample_uniform(RngStream& stream, double lo, double hi,
                                          std::size_t count) {
  require(std::isfinite(lo) && std::isfinite(hi) && lo <= hi, "invalid uniform bounds");
  std::vector<double> out(count);
  for (double& v : out) v = lo + (hi - lo) * stream.next_double();
  return out;
}

// Floyd's algorithm: uniform over all size-`take` subsets, returned sorted.
inline std::vector<std::size_t> sample_indices_without_replacement(RngStream& stream,
                                                                   std::size_t population,
                                                                   std::size_t take) {
  if (take > population) throw ValidationError("sample larger than population");
  std::vector<bool> chosen(population, false);
  for (std::size_t j = population - take; j < population; ++j) {
    const auto t = static_cast<std::size_t>(stream.next_below(j + 1));
    chosen[chosen[t] ? j : t] = true;
  }
  std::vector<std::size_t> out;
  out.reserve(take);
  for (std::size_t i = 0; i < population; ++i)
    if (chosen[i]) out.push_back(i);
  return out;
}

// Population mean and standard deviation (divide by N).
inline NormalParams mean_and_std(std::span<const double> values) {
  if (values.empty()) return {};
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

// ---------------------------------------------------------------------------
// Routing primitives

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double top = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - top);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// Indices of the k largest values, largest first; ties go to the lower index.
inline std::vector<std::size_t> top_k(std::span<const double> values, std::size_t k) {
  if (k > values.size())
    throw ValidationError("top_k: k=" + std::to_string(k) + " exceeds length " +
                          std::to_string(values.size()));
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return values[a] > values[b] || (values[a] == values[b] && a < b);
                    });
  idx.resize(k);
  return idx;
}

}  // namespace moeup
