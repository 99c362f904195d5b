// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Post-hoc analysis: per-domain routing distributions, retained-dimension
// overlap statistics of a re-initialization plan, and token catch-up between
// two loss curves.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moeup/config.hpp"
#include "moeup/routing_trace.hpp"
#include "moeup/trainer.hpp"
#include "moeup/upcycle.hpp"

namespace moeup {

// ---------------------------------------------------------------------------
// Routing

struct LayerRouting {
  std::size_t layer = 0;
  // Share of top-k assignments per expert: assignments / (k x tokens).
  std::map<std::string, std::vector<double>> fractions;
  std::map<std::string, std::size_t> tokens;
  std::vector<double> pooled;  // all domains together
  double entropy = 0.0;        // -sum p ln p of `pooled`, nats
};

struct RoutingSummary {
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::vector<LayerRouting> layers;
  std::vector<std::string> warnings;
};

inline double entropy_nats(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

inline RoutingSummary summarize_routing(const RoutingTrace& trace) {
  if (trace.records.empty()) throw ValidationError("summarize_routing: empty routing trace");
  RoutingSummary out;
  out.num_experts = trace.num_experts;
  out.top_k = trace.top_k;
  const std::size_t n = trace.num_experts;

  std::vector<std::map<std::string, std::vector<double>>> counts(trace.num_layers);
  std::vector<std::map<std::string, double>> picks(trace.num_layers);
  std::vector<std::map<std::string, std::size_t>> tokens(trace.num_layers);
  std::map<std::string, bool> domains;
  for (const auto& r : trace.records) {
    require(r.layer < trace.num_layers, "summarize_routing: record layer out of range");
    auto& c = counts[r.layer][r.domain];
    if (c.empty()) c.assign(n, 0.0);
    for (std::size_t e : r.selected) {
      require(e < n, "summarize_routing: expert index out of range");
      c[e] += 1.0;
    }
    picks[r.layer][r.domain] += static_cast<double>(r.selected.size());
    ++tokens[r.layer][r.domain];
    domains[r.domain] = true;
  }
  for (std::size_t l = 0; l < trace.num_layers; ++l) {
    LayerRouting lr;
    lr.layer = l;
    lr.pooled.assign(n, 0.0);
    double all = 0.0;
    for (const auto& [domain, _] : domains) {
      auto it = counts[l].find(domain);
      if (it == counts[l].end()) {
        out.warnings.push_back("layer " + std::to_string(l) + ": domain '" + domain +
                               "' has no tokens, omitted");
        continue;
      }
      std::vector<double> f(n);
      for (std::size_t e = 0; e < n; ++e) {
        f[e] = it->second[e] / picks[l][domain];
        lr.pooled[e] += it->second[e];
      }
      all += picks[l][domain];
      lr.fractions[domain] = std::move(f);
      lr.tokens[domain] = tokens[l][domain];
    }
    if (all == 0.0) {
      out.warnings.push_back("layer " + std::to_string(l) + ": no routing records");
      continue;
    }
    for (double& v : lr.pooled) v /= all;
    lr.entropy = entropy_nats(lr.pooled);
    out.layers.push_back(std::move(lr));
  }
  return out;
}

inline Json to_json(const RoutingSummary& s) {
  Json layers = Json::array();
  for (const auto& l : s.layers)
    layers.push_back({{"layer", l.layer},
                      {"fractions", l.fractions},
                      {"tokens", l.tokens},
                      {"pooled", l.pooled},
                      {"entropy", l.entropy}});
  return Json{{"num_experts", s.num_experts}, {"top_k", s.top_k}, {"layers", layers},
              {"warnings", s.warnings}, {"normalization", "assignments (k per token)"}};
}

// Columns: layer,domain,expert,fraction,tokens,layer_entropy
inline void write_routing_csv(const RoutingSummary& s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "layer,domain,expert,fraction,tokens,layer_entropy\n";
  out.precision(17);
  for (const auto& l : s.layers)
    for (const auto& [domain, f] : l.fractions)
      for (std::size_t e = 0; e < f.size(); ++e)
        out << l.layer << ',' << domain << ',' << e << ',' << f[e] << ',' << l.tokens.at(domain)
            << ',' << l.entropy << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Overlap of retained dimensions

struct PairOverlap {
  std::size_t a = 0;
  std::size_t b = 0;
  std::size_t common = 0;
  double fraction = 0.0;  // common / d_f
};

struct LayerOverlap {
  std::size_t layer = 0;
  std::vector<PairOverlap> pairs;
  double pair_mean = 0.0;
  double pair_theory = 0.0;  // (1 - r)^2
  double pair_exact = 0.0;   // hypergeometric mean with the actual retained count
  double pair_se = 0.0;      // standard error of pair_mean
  std::string subset_method;  // "exhaustive" or "monte_carlo"
  std::size_t subsets = 0;
  double subset_mean = 0.0;   // all-common fraction over k-subsets
  double subset_theory = 0.0;  // (1 - r)^k
  double subset_exact = 0.0;
  double subset_se = 0.0;
};

struct OverlapReport {
  double ratio = 0.0;
  std::size_t k = 0;
  std::size_t intermediate_size = 0;
  std::vector<LayerOverlap> layers;
};

namespace detail {

inline double binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0.0;
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

// All k-subsets of {0..n-1} in lexicographic order.
inline std::vector<std::vector<std::size_t>> all_subsets(std::size_t n, std::size_t k) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur(k);
  for (std::size_t i = 0; i < k; ++i) cur[i] = i;
  while (true) {
    out.push_back(cur);
    std::size_t i = k;
    while (i > 0 && cur[i - 1] == n - k + i - 1) --i;
    if (i == 0) break;
    ++cur[i - 1];
    for (std::size_t j = i; j < k; ++j) cur[j] = cur[j - 1] + 1;
  }
  return out;
}

}  // namespace detail

inline constexpr std::size_t kMaxExhaustiveSubsets = 1000;

// Pairwise and k-wise overlap of retained dims (parent coordinates) among the
// routed experts of each layer. k-subsets are enumerated when there are at
// most 1000 of them, otherwise 1000 are sampled with `seed`.
inline OverlapReport overlap_report(const ReinitPlan& plan, std::size_t k, std::uint64_t seed = 0) {
  require(!plan.experts.empty(), "overlap_report: plan is empty");
  require(plan.num_experts >= 2, "overlap_report: need at least two experts");
  require(k >= 1 && k <= plan.num_experts, "overlap_report: k must be in [1, num_experts]");
  OverlapReport out;
  out.ratio = plan.ratio;
  out.k = k;
  out.intermediate_size = plan.intermediate_size;
  const double N = static_cast<double>(plan.intermediate_size);
  const std::size_t n = plan.num_experts;

  for (std::size_t l = 0; l < plan.num_layers; ++l) {
    std::vector<std::vector<bool>> retained(n, std::vector<bool>(plan.intermediate_size, false));
    double m = 0.0;  // retained dims per expert
    for (std::size_t e = 0; e < n; ++e) {
      const auto dims = plan.find(l, e).retained_parent_dims();
      for (std::size_t d : dims) retained[e][d] = true;
      m = static_cast<double>(dims.size());
    }
    LayerOverlap lo;
    lo.layer = l;
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = a + 1; b < n; ++b) {
        std::size_t c = 0;
        for (std::size_t d = 0; d < plan.intermediate_size; ++d) c += retained[a][d] && retained[b][d];
        lo.pairs.push_back({a, b, c, static_cast<double>(c) / N});
        lo.pair_mean += static_cast<double>(c) / N;
      }
    lo.pair_mean /= static_cast<double>(lo.pairs.size());
    lo.pair_theory = (1.0 - plan.ratio) * (1.0 - plan.ratio);
    const double q = m / N;
    lo.pair_exact = q * q;
    // Hypergeometric(N, K = m, draws = m); overlaps of distinct pairs are
    // uncorrelated, so the mean's SE is sd / sqrt(pairs).
    const double var = N > 1 ? m * m * (N - m) * (N - m) / (N * N * (N - 1)) : 0.0;
    lo.pair_se = std::sqrt(var) / N / std::sqrt(static_cast<double>(lo.pairs.size()));

    std::vector<std::vector<std::size_t>> subsets;
    if (detail::binomial(n, k) <= static_cast<double>(kMaxExhaustiveSubsets)) {
      lo.subset_method = "exhaustive";
      subsets = detail::all_subsets(n, k);
    } else {
      lo.subset_method = "monte_carlo";
      for (std::size_t s = 0; s < kMaxExhaustiveSubsets; ++s) {
        RngStream rs(seed, {0x6f7665726c6170ULL, l, s});
        subsets.push_back(sample_indices_without_replacement(rs, n, k));
      }
    }
    lo.subsets = subsets.size();
    for (const auto& sub : subsets) {
      std::size_t c = 0;
      for (std::size_t d = 0; d < plan.intermediate_size; ++d) {
        bool all = true;
        for (std::size_t e : sub) all = all && retained[e][d];
        c += all;
      }
      lo.subset_mean += static_cast<double>(c) / N;
    }
    lo.subset_mean /= static_cast<double>(subsets.size());
    lo.subset_theory = std::pow(1.0 - plan.ratio, static_cast<double>(k));
    lo.subset_exact = std::pow(q, static_cast<double>(k));
    if (k == 2) {
      lo.subset_se = std::sqrt(var) / N / std::sqrt(static_cast<double>(subsets.size()));
    } else {
      // Subsets sharing experts are correlated; count only disjoint ones.
      const double qk = lo.subset_exact;
      const double independent = std::max(1.0, std::floor(static_cast<double>(n) / static_cast<double>(k)));
      lo.subset_se = std::sqrt(qk * (1.0 - qk) / N) / std::sqrt(independent);
    }
    out.layers.push_back(std::move(lo));
  }
  return out;
}

inline Json to_json(const OverlapReport& r) {
  Json layers = Json::array();
  for (const auto& l : r.layers) {
    Json pairs = Json::array();
    for (const auto& p : l.pairs)
      pairs.push_back({{"a", p.a}, {"b", p.b}, {"common", p.common}, {"fraction", p.fraction}});
    layers.push_back({{"layer", l.layer},
                      {"pairs", pairs},
                      {"pair_mean", l.pair_mean},
                      {"pair_theory", l.pair_theory},
                      {"pair_exact", l.pair_exact},
                      {"pair_se", l.pair_se},
                      {"subset_method", l.subset_method},
                      {"subsets", l.subsets},
                      {"subset_mean", l.subset_mean},
                      {"subset_theory", l.subset_theory},
                      {"subset_exact", l.subset_exact},
                      {"subset_se", l.subset_se}});
  }
  return Json{{"ratio", r.ratio}, {"k", r.k}, {"intermediate_size", r.intermediate_size},
              {"layers", layers}};
}

// ---------------------------------------------------------------------------
// Catch-up

struct CatchUpPoint {
  std::uint64_t base_tokens = 0;
  double base_loss = 0.0;
  std::optional<double> other_tokens;  // first time `other` reaches base_loss
  std::optional<double> deficit;       // base_tokens - other_tokens

  bool missing() const { return !deficit.has_value(); }
};

// Earliest token count at which `curve` reaches loss <= target, linearly
// interpolated between points; nullopt if it never does.
inline std::optional<double> first_reach(const LossCurve& curve, double target) {
  const auto& p = curve.points;
  if (p.empty()) return std::nullopt;
  if (p.front().lm_loss <= target) return static_cast<double>(p.front().tokens);
  for (std::size_t j = 0; j + 1 < p.size(); ++j) {
    const double l0 = p[j].lm_loss, l1 = p[j + 1].lm_loss;
    if (l1 > target) continue;
    const double t0 = static_cast<double>(p[j].tokens), t1 = static_cast<double>(p[j + 1].tokens);
    return t0 + (l0 - target) / (l0 - l1) * (t1 - t0);
  }
  return std::nullopt;
}

// For each base point (t, L): t minus the tokens `other` needed to reach L.
// Points `other` never reaches are reported as missing, not extrapolated.
inline std::vector<CatchUpPoint> catch_up(const LossCurve& base, const LossCurve& other) {
  require(!base.empty() && !other.empty(), "catch_up: both curves must be non-empty");
  std::vector<CatchUpPoint> out;
  for (const auto& p : base.points) {
    CatchUpPoint c;
    c.base_tokens = p.tokens;
    c.base_loss = p.lm_loss;
    c.other_tokens = first_reach(other, p.lm_loss);
    if (c.other_tokens) c.deficit = static_cast<double>(p.tokens) - *c.other_tokens;
    out.push_back(c);
  }
  return out;
}

// Trailing moving average of lm_loss (and train_loss) over `window` points.
inline LossCurve smooth_curve(const LossCurve& curve, std::size_t window = 5) {
  require(window >= 1, "smooth_curve: window must be at least 1");
  LossCurve out = curve;
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double lm = 0.0, tr = 0.0;
    for (std::size_t j = lo; j <= i; ++j) {
      lm += curve.points[j].lm_loss;
      tr += curve.points[j].train_loss;
    }
    const double cnt = static_cast<double>(i - lo + 1);
    out.points[i].lm_loss = lm / cnt;
    out.points[i].train_loss = tr / cnt;
  }
  return out;
}

// Columns: base_tokens,base_loss,other_tokens,deficit (empty when missing)
inline void write_catch_up_csv(const std::vector<CatchUpPoint>& points,
                               const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.precision(17);
  out << "base_tokens,base_loss,other_tokens,deficit\n";
  for (const auto& p : points) {
    out << p.base_tokens << ',' << p.base_loss << ',';
    if (p.other_tokens) out << *p.other_tokens;
    out << ',';
    if (p.deficit) out << *p.deficit;
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline Json to_json(const std::vector<CatchUpPoint>& points) {
  Json arr = Json::array();
  for (const auto& p : points)
    arr.push_back({{"base_tokens", p.base_tokens},
                   {"base_loss", p.base_loss},
                   {"other_tokens", p.other_tokens ? Json(*p.other_tokens) : Json(nullptr)},
                   {"deficit", p.deficit ? Json(*p.deficit) : Json(nullptr)}});
  return arr;
}

}  // namespace moeup
