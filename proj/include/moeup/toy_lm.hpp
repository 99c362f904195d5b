// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// A small decoder-only language model used to exercise upcycled checkpoints:
// pre-norm blocks of causal multi-head attention (grouped key/value heads
// allowed) and a SwiGLU FFN or MoE layer, sinusoidal absolute positions,
// gain-only layer norms and an untied output head.

#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "moeup/checkpoint.hpp"
#include "moeup/model.hpp"
#include "moeup/routing_trace.hpp"

namespace moeup {

struct AttentionWeights {
  Matrix q, k, v, o;
};

struct DecoderLayer {
  Matrix attn_norm;  // 1 x hidden
  AttentionWeights attn;
  Matrix ffn_norm;  // 1 x hidden
  FfnWeights ffn;   // dense models
  MoeLayerWeights moe;  // MoE models
};

struct ToyLm {
  ModelConfig config;
  Matrix embed;
  std::vector<DecoderLayer> layers;
  Matrix final_norm;
  Matrix head;
};

inline constexpr double kLayerNormEps = 1e-5;

// Visits every parameter as (canonical name, matrix) in manifest order.
template <typename Lm, typename Fn>
  requires std::same_as<std::remove_const_t<Lm>, ToyLm>
void for_each_parameter(Lm& m, Fn&& fn) {
  fn(std::string(names::kEmbed), m.embed);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& l = m.layers[i];
    fn(names::attn_norm(i), l.attn_norm);
    fn(names::attn(i, "q"), l.attn.q);
    fn(names::attn(i, "k"), l.attn.k);
    fn(names::attn(i, "v"), l.attn.v);
    fn(names::attn(i, "o"), l.attn.o);
    fn(names::ffn_norm(i), l.ffn_norm);
    if (!m.config.is_moe()) {
      fn(names::ffn(i, "gate"), l.ffn.gate);
      fn(names::ffn(i, "up"), l.ffn.up);
      fn(names::ffn(i, "down"), l.ffn.down);
      continue;
    }
    fn(names::router(i), l.moe.router);
    for (std::size_t e = 0; e < l.moe.experts.size(); ++e) {
      fn(names::expert(i, e, "gate"), l.moe.experts[e].gate);
      fn(names::expert(i, e, "up"), l.moe.experts[e].up);
      fn(names::expert(i, e, "down"), l.moe.experts[e].down);
    }
    if (m.config.shared_experts > 0) {
      fn(names::shared(i, "gate"), l.moe.shared.gate);
      fn(names::shared(i, "up"), l.moe.shared.up);
      fn(names::shared(i, "down"), l.moe.shared.down);
    }
  }
  fn(std::string(names::kFinalNorm), m.final_norm);
  fn(std::string(names::kHead), m.head);
}

// All-zero model with the shapes implied by `config`.
inline ToyLm zeros_like(const ModelConfig& config) {
  ToyLm m;
  m.config = config;
  m.layers.resize(config.num_layers);
  if (config.is_moe())
    for (auto& l : m.layers) l.moe.experts.resize(config.routed_experts());
  std::map<std::string, TensorSpec> shapes;
  for (auto& spec : tensor_layout(config)) shapes.emplace(spec.name, spec);
  for_each_parameter(m, [&](const std::string& name, Matrix& w) {
    const TensorSpec& s = shapes.at(name);
    w = Matrix(s.rows, s.cols);
  });
  return m;
}

inline ToyLm zeros_like(const ToyLm& model) { return zeros_like(model.config); }

inline ToyLm from_checkpoint(const Checkpoint& ckpt) {
  validate_structure(ckpt);
  ToyLm m = zeros_like(ckpt.config);
  for_each_parameter(m, [&](const std::string& name, Matrix& w) { w = ckpt.at(name); });
  return m;
}

inline Checkpoint to_checkpoint(const ToyLm& model, Provenance metadata = {}) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  ckpt.metadata = std::move(metadata);
  for_each_parameter(model, [&](const std::string& name, const Matrix& w) {
    ckpt.tensors.emplace(name, w);
  });
  return ckpt;
}

inline std::size_t parameter_count(const ToyLm& model) {
  std::size_t n = 0;
  for_each_parameter(model, [&](const std::string&, const Matrix& w) { n += w.size(); });
  return n;
}

// pe(t, 2i) = sin(t / 10000^(2i/d)), pe(t, 2i+1) = cos(t / 10000^(2i/d)).
inline double positional_encoding(std::size_t t, std::size_t dim, std::size_t d) {
  const double pair = static_cast<double>(dim / 2 * 2);
  const double angle =
      static_cast<double>(t) / std::pow(10000.0, pair / static_cast<double>(d));
  return dim % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

struct LayerNormCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, const Matrix& gain, LayerNormCache& cache) {
  const std::size_t d = x.cols();
  Matrix y(x.rows(), d);
  cache.xhat = Matrix(x.rows(), d);
  cache.inv_std.assign(x.rows(), 0.0);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto row = x.row(t);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.inv_std[t] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      cache.xhat(t, j) = (row[j] - mean) * inv;
      y(t, j) = gain(0, j) * cache.xhat(t, j);
    }
  }
  return y;
}

// dx += LN'(dy); dgain += sum_t dy * xhat.
inline void layer_norm_backward(const Matrix& dy, const Matrix& gain, const LayerNormCache& cache,
                                Matrix& dgain, Matrix& dx) {
  const std::size_t d = dy.cols();
  const double inv_d = 1.0 / static_cast<double>(d);
  std::vector<double> dxhat(d);
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain(0, j) += dy(t, j) * cache.xhat(t, j);
      dxhat[j] = dy(t, j) * gain(0, j);
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * cache.xhat(t, j);
    }
    mean_dxhat *= inv_d;
    mean_dxhat_xhat *= inv_d;
    for (std::size_t j = 0; j < d; ++j)
      dx(t, j) += cache.inv_std[t] * (dxhat[j] - mean_dxhat - cache.xhat(t, j) * mean_dxhat_xhat);
  }
}

struct LayerCache {
  Matrix input;  // residual stream entering the block
  LayerNormCache ln1;
  Matrix a;  // normed input to attention
  Matrix q, k, v;
  std::vector<Matrix> attn_probs;  // per head, T x T, lower triangular
  Matrix ctx;                      // concatenated head outputs
  LayerNormCache ln2;
  Matrix b;  // normed input to the FFN / MoE
  std::vector<FfnCache> ffn;
  std::vector<MoeOutput> moe;
  std::vector<MoeCache> moe_cache;
};

struct LmCache {
  std::vector<std::uint32_t> tokens;
  std::vector<LayerCache> layers;
  LayerNormCache final_ln;
  Matrix z;       // final normed hidden states
  Matrix logits;  // T x vocab
  Matrix probs;   // softmax(logits) per position
  double loss = 0.0;
};

struct LmForward {
  Matrix logits;
  RoutingTrace trace;
  double loss = 0.0;
};

namespace detail {

inline void check_tokens(const ToyLm& model, std::span<const std::uint32_t> tokens) {
  for (std::uint32_t t : tokens)
    if (t >= model.config.vocab_size)
      throw ValidationError("token id " + std::to_string(t) + " out of range for vocab size " +
                            std::to_string(model.config.vocab_size));
}

inline void attention_forward(const ModelConfig& c, LayerCache& lc) {
  const std::size_t T = lc.a.rows();
  const std::size_t dk = c.head_dim;
  const std::size_t group = c.num_heads / c.num_query_groups;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  lc.ctx = Matrix(T, c.q_width());
  lc.attn_probs.assign(c.num_heads, Matrix(T, T));
  std::vector<double> scores(T);
  for (std::size_t h = 0; h < c.num_heads; ++h) {
    const std::size_t qo = h * dk;
    const std::size_t ko = (h / group) * dk;
    Matrix& p = lc.attn_probs[h];
    for (std::size_t t = 0; t < T; ++t) {
      const double* qt = lc.q.data() + t * lc.q.cols() + qo;
      for (std::size_t u = 0; u <= t; ++u) {
        const double* ku = lc.k.data() + u * lc.k.cols() + ko;
        double s = 0.0;
        for (std::size_t j = 0; j < dk; ++j) s += qt[j] * ku[j];
        scores[u] = s * scale;
      }
      const auto probs = softmax(std::span<const double>(scores.data(), t + 1));
      double* out = lc.ctx.data() + t * lc.ctx.cols() + qo;
      for (std::size_t u = 0; u <= t; ++u) {
        p(t, u) = probs[u];
        const double* vu = lc.v.data() + u * lc.v.cols() + ko;
        for (std::size_t j = 0; j < dk; ++j) out[j] += probs[u] * vu[j];
      }
    }
  }
}

}  // namespace detail

// Full forward pass keeping every activation needed for backward.
inline LmCache lm_forward_cached(const ToyLm& model, std::span<const std::uint32_t> tokens) {
  detail::check_tokens(model, tokens);
  const ModelConfig& c = model.config;
  const std::size_t T = tokens.size();
  const std::size_t d = c.hidden_size;
  LmCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(model.layers.size());

  Matrix h(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = model.embed.row(tokens[t]);
    for (std::size_t j = 0; j < d; ++j) h(t, j) = e[j] + positional_encoding(t, j, d);
  }

  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const DecoderLayer& layer = model.layers[li];
    LayerCache& lc = cache.layers[li];
    lc.input = h;
    lc.a = layer_norm(h, layer.attn_norm, lc.ln1);
    lc.q = matmul(lc.a, layer.attn.q);
    lc.k = matmul(lc.a, layer.attn.k);
    lc.v = matmul(lc.a, layer.attn.v);
    detail::attention_forward(c, lc);
    matmul_acc(lc.ctx, layer.attn.o, h);

    lc.b = layer_norm(h, layer.ffn_norm, lc.ln2);
    if (!c.is_moe()) {
      lc.ffn.resize(T);
      for (std::size_t t = 0; t < T; ++t) {
        const auto f = ffn_forward(layer.ffn, lc.b.row(t), &lc.ffn[t]);
        for (std::size_t j = 0; j < d; ++j) h(t, j) += f[j];
      }
    } else {
      lc.moe.resize(T);
      lc.moe_cache.resize(T);
      for (std::size_t t = 0; t < T; ++t) {
        lc.moe[t] = moe_forward(layer.moe, lc.b.row(t), c.top_k, &lc.moe_cache[t]);
        for (std::size_t j = 0; j < d; ++j) h(t, j) += lc.moe[t].y[j];
      }
    }
  }

  cache.z = layer_norm(h, model.final_norm, cache.final_ln);
  cache.logits = matmul(cache.z, model.head);
  cache.probs = Matrix(T, c.vocab_size);
  double loss = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto p = softmax(cache.logits.row(t));
    std::copy(p.begin(), p.end(), cache.probs.row(t).begin());
    if (t + 1 < T) {
      // log-softmax computed directly for accuracy at tiny probabilities.
      const auto row = cache.logits.row(t);
      const double top = *std::max_element(row.begin(), row.end());
      double sum = 0.0;
      for (double v : row) sum += std::exp(v - top);
      loss -= row[tokens[t + 1]] - top - std::log(sum);
    }
  }
  // A sequence with fewer than two tokens has no targets; its loss is 0.
  cache.loss = T > 1 ? loss / static_cast<double>(T - 1) : 0.0;
  return cache;
}

inline RoutingTrace routing_trace(const ToyLm& model, const LmCache& cache,
                                  const std::string& domain = {}) {
  RoutingTrace trace;
  if (!model.config.is_moe()) return trace;
  trace.num_layers = model.layers.size();
  trace.num_experts = model.config.routed_experts();
  trace.top_k = model.config.top_k;
  for (std::size_t li = 0; li < cache.layers.size(); ++li) {
    const auto& lc = cache.layers[li];
    for (std::size_t t = 0; t < lc.moe.size(); ++t) {
      const MoeOutput& m = lc.moe[t];
      RoutingRecord r;
      r.layer = li;
      r.token = t;
      r.domain = domain;
      r.selected = m.selected;
      for (std::size_t e : m.selected) r.gates.push_back(m.gates[e]);
      r.probs = m.probs;
      trace.records.push_back(std::move(r));
    }
  }
  return trace;
}

// Logits per position, the routing trace, and the mean next-token
// cross-entropy over positions 0..T-2.
inline LmForward lm_forward(const ToyLm& model, std::span<const std::uint32_t> tokens,
                            const std::string& domain = {}) {
  LmCache cache = lm_forward_cached(model, tokens);
  LmForward out;
  out.trace = routing_trace(model, cache, domain);
  out.logits = std::move(cache.logits);
  out.loss = cache.loss;
  return out;
}

struct LmBackwardOptions {
  // Multiplies the next-token loss gradient (e.g. 1 / batch size).
  double lm_scale = 1.0;
  // Per MoE layer, dL/dprob for each expert's full-softmax router
  // probability, applied identically at every token. Empty = no auxiliary term.
  std::vector<std::vector<double>> prob_coeff;
  // Optional (T-1) x vocab target distributions replacing one-hot targets.
  const Matrix* soft_targets = nullptr;
};

// Accumulates gradients of lm_scale * loss (+ auxiliary router term) into
// `grad`, which must have the model's shapes.
inline void lm_backward(const ToyLm& model, const LmCache& cache, const LmBackwardOptions& opts,
                        ToyLm& grad) {
  const ModelConfig& c = model.config;
  const std::size_t T = cache.tokens.size();
  const std::size_t d = c.hidden_size;
  const std::size_t V = c.vocab_size;

  Matrix dlogits(T, V);
  if (T > 1) {
    const double scale = opts.lm_scale / static_cast<double>(T - 1);
    for (std::size_t t = 0; t + 1 < T; ++t) {
      for (std::size_t j = 0; j < V; ++j) {
        const double target = opts.soft_targets ? (*opts.soft_targets)(t, j)
                                                : (j == cache.tokens[t + 1] ? 1.0 : 0.0);
        dlogits(t, j) = scale * (cache.probs(t, j) - target);
      }
    }
  }
  matmul_tn_acc(cache.z, dlogits, grad.head);
  Matrix dz(T, d);
  matmul_nt_acc(dlogits, model.head, dz);
  Matrix dh(T, d);
  layer_norm_backward(dz, model.final_norm, cache.final_ln, grad.final_norm, dh);

  const std::size_t dk = c.head_dim;
  const std::size_t group = c.num_heads / c.num_query_groups;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const DecoderLayer& layer = model.layers[li];
    DecoderLayer& g = grad.layers[li];
    const LayerCache& lc = cache.layers[li];

    // FFN / MoE residual branch.
    Matrix db(T, d);
    if (!c.is_moe()) {
      for (std::size_t t = 0; t < T; ++t)
        ffn_backward(layer.ffn, lc.b.row(t), lc.ffn[t], dh.row(t), g.ffn, db.row(t));
    } else {
      std::span<const double> coeff;
      if (li < opts.prob_coeff.size()) coeff = opts.prob_coeff[li];
      for (std::size_t t = 0; t < T; ++t)
        moe_backward(layer.moe, lc.b.row(t), lc.moe[t], lc.moe_cache[t], dh.row(t), coeff, g.moe,
                     db.row(t));
    }
    layer_norm_backward(db, layer.ffn_norm, lc.ln2, g.ffn_norm, dh);

    // Attention residual branch.
    matmul_tn_acc(lc.ctx, dh, g.attn.o);
    Matrix dctx(T, c.q_width());
    matmul_nt_acc(dh, layer.attn.o, dctx);
    Matrix dq(T, c.q_width()), dkm(T, c.kv_width()), dv(T, c.kv_width());
    std::vector<double> dp(T);
    for (std::size_t hd = 0; hd < c.num_heads; ++hd) {
      const std::size_t qo = hd * dk;
      const std::size_t ko = (hd / group) * dk;
      const Matrix& p = lc.attn_probs[hd];
      for (std::size_t t = 0; t < T; ++t) {
        const double* dout = dctx.data() + t * dctx.cols() + qo;
        double weighted = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* vu = lc.v.data() + u * lc.v.cols() + ko;
          double s = 0.0;
          for (std::size_t j = 0; j < dk; ++j) s += dout[j] * vu[j];
          dp[u] = s;
          weighted += p(t, u) * s;
          double* dvu = dv.data() + u * dv.cols() + ko;
          for (std::size_t j = 0; j < dk; ++j) dvu[j] += p(t, u) * dout[j];
        }
        const double* qt = lc.q.data() + t * lc.q.cols() + qo;
        double* dqt = dq.data() + t * dq.cols() + qo;
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = p(t, u) * (dp[u] - weighted) * scale;
          if (ds == 0.0) continue;
          const double* ku = lc.k.data() + u * lc.k.cols() + ko;
          double* dku = dkm.data() + u * dkm.cols() + ko;
          for (std::size_t j = 0; j < dk; ++j) {
            dqt[j] += ds * ku[j];
            dku[j] += ds * qt[j];
          }
        }
      }
    }
    matmul_tn_acc(lc.a, dq, g.attn.q);
    matmul_tn_acc(lc.a, dkm, g.attn.k);
    matmul_tn_acc(lc.a, dv, g.attn.v);
    Matrix da(T, d);
    matmul_nt_acc(dq, layer.attn.q, da);
    matmul_nt_acc(dkm, layer.attn.k, da);
    matmul_nt_acc(dv, layer.attn.v, da);
    layer_norm_backward(da, layer.attn_norm, lc.ln1, g.attn_norm, dh);
  }

  for (std::size_t t = 0; t < T; ++t) {
    auto row = grad.embed.row(cache.tokens[t]);
    for (std::size_t j = 0; j < d; ++j) row[j] += dh(t, j);
  }
}

// Gradient of the next-token loss for a single sequence.
inline ToyLm lm_backward(const ToyLm& model, std::span<const std::uint32_t> tokens) {
  const LmCache cache = lm_forward_cached(model, tokens);
  ToyLm grad = zeros_like(model);
  lm_backward(model, cache, {}, grad);
  return grad;
}

}  // namespace moeup
