// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense -> MoE construction: from-scratch initialization, naive upcycling,
// random-noise upcycling, drop-upcycling (partial statistics-matched
// re-initialization along the intermediate dimension), Branch-Train-MiX
// merging and the fine-grained / shared-expert variant of drop-upcycling.
//
// Randomness is drawn from streams keyed by (layer, expert, purpose), so an
// expert's initialization never depends on how many other experts exist or
// in which order they are built.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "moeup/checkpoint.hpp"
#include "moeup/model.hpp"

namespace moeup {

enum class Method { kFromScratch, kNaive, kRandomNoise, kDrop, kBtx, kFineGrainedDrop };
enum class SharedInit { kCopy, kDrop };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::kFromScratch: return "scratch";
    case Method::kNaive: return "naive";
    case Method::kRandomNoise: return "rnu";
    case Method::kDrop: return "drop";
    case Method::kBtx: return "btx";
    case Method::kFineGrainedDrop: return "fg-drop";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::kFromScratch, Method::kNaive, Method::kRandomNoise, Method::kDrop,
                   Method::kBtx, Method::kFineGrainedDrop})
    if (method_name(m) == s) return m;
  throw ValidationError("unknown method '" + s + "' (expected scratch, naive, rnu, drop, btx, fg-drop)");
}

inline std::string shared_init_name(SharedInit s) { return s == SharedInit::kCopy ? "copy" : "drop"; }

inline SharedInit parse_shared_init(const std::string& s) {
  if (s == "copy") return SharedInit::kCopy;
  if (s == "drop") return SharedInit::kDrop;
  throw ValidationError("unknown shared_init '" + s + "' (expected copy or drop)");
}

struct UpcycleSpec {
  Method method = Method::kDrop;
  double ratio = 0.5;  // r, fraction of intermediate dims re-initialized per expert
  std::uint64_t seed = 0;
  double noise_sigma = 0.02;    // random-noise upcycling
  double noise_fraction = 0.5;  // random-noise upcycling
  std::size_t granularity = 1;
  std::size_t shared = 0;
  SharedInit shared_init = SharedInit::kCopy;
  std::optional<double> scale_factor;  // fine-grained experts only; off by default

  void validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ValidationError("ratio must be in [0, 1]");
    if (!(noise_fraction >= 0.0 && noise_fraction <= 1.0))
      throw ValidationError("noise_fraction must be in [0, 1]");
    if (!(noise_sigma >= 0.0 && std::isfinite(noise_sigma)))
      throw ValidationError("noise_sigma must be finite and non-negative");
    if (granularity < 1) throw ValidationError("granularity must be at least 1");
    if (scale_factor && !(std::isfinite(*scale_factor) && *scale_factor > 0.0))
      throw ValidationError("scale_factor must be finite and positive");
  }
};

inline Json to_json(const UpcycleSpec& s) {
  Json j = {{"method", method_name(s.method)},     {"ratio", s.ratio},
            {"seed", s.seed},                      {"noise_sigma", s.noise_sigma},
            {"noise_fraction", s.noise_fraction},  {"granularity", s.granularity},
            {"shared", s.shared},                  {"shared_init", shared_init_name(s.shared_init)}};
  j["scale_factor"] = s.scale_factor ? Json(*s.scale_factor) : Json(nullptr);
  return j;
}

inline UpcycleSpec upcycle_spec_from_json(const Json& j) {
  detail::reject_unknown_keys(j,
                              {"method", "ratio", "seed", "noise_sigma", "noise_fraction",
                               "granularity", "shared", "shared_init", "scale_factor"},
                              "upcycle spec");
  UpcycleSpec s;
  try {
    if (j.contains("method")) s.method = parse_method(j.at("method").get<std::string>());
    if (j.contains("ratio")) s.ratio = j.at("ratio").get<double>();
    if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("noise_sigma")) s.noise_sigma = j.at("noise_sigma").get<double>();
    if (j.contains("noise_fraction")) s.noise_fraction = j.at("noise_fraction").get<double>();
    if (j.contains("granularity")) s.granularity = detail::json_count(j, "granularity");
    if (j.contains("shared")) s.shared = detail::json_count(j, "shared");
    if (j.contains("shared_init"))
      s.shared_init = parse_shared_init(j.at("shared_init").get<std::string>());
    if (j.contains("scale_factor") && !j.at("scale_factor").is_null())
      s.scale_factor = j.at("scale_factor").get<double>();
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("invalid upcycle spec: ") + e.what());
  }
  s.validate();
  return s;
}

// Re-initialization record of one expert. Indices in `dropped` are local to
// the expert (0 .. width-1); `parent_dims` maps local index -> parent
// intermediate dimension (identity when empty).
struct ExpertPlan {
  std::size_t layer = 0;
  std::size_t expert = 0;
  bool shared = false;
  std::size_t width = 0;
  std::vector<std::size_t> parent_dims;
  std::vector<std::size_t> dropped;
  NormalParams gate, up, down;

  std::size_t parent_dim(std::size_t local) const {
    return parent_dims.empty() ? local : parent_dims[local];
  }

  std::vector<bool> retained_mask() const {
    std::vector<bool> mask(width, true);
    for (std::size_t j : dropped) mask[j] = false;
    return mask;
  }

  // Retained dimensions in parent coordinates, ascending.
  std::vector<std::size_t> retained_parent_dims() const {
    std::vector<std::size_t> out;
    const auto mask = retained_mask();
    for (std::size_t j = 0; j < width; ++j)
      if (mask[j]) out.push_back(parent_dim(j));
    std::sort(out.begin(), out.end());
    return out;
  }
};

struct ReinitPlan {
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::size_t intermediate_size = 0;  // parent d_f
  std::size_t num_layers = 0;
  std::size_t num_experts = 0;  // routed experts per layer
  std::vector<ExpertPlan> experts;

  const ExpertPlan& find(std::size_t layer, std::size_t expert) const {
    for (const auto& e : experts)
      if (!e.shared && e.layer == layer && e.expert == expert) return e;
    throw ValidationError("plan has no entry for layer " + std::to_string(layer) + " expert " +
                          std::to_string(expert));
  }

  std::vector<std::vector<bool>> retained_masks(std::size_t layer) const {
    std::vector<std::vector<bool>> out;
    for (std::size_t e = 0; e < num_experts; ++e) out.push_back(find(layer, e).retained_mask());
    return out;
  }
};

inline Json to_json(const NormalParams& p) { return Json{{"mu", p.mu}, {"sigma", p.sigma}}; }

inline Json to_json(const ReinitPlan& plan) {
  Json experts = Json::array();
  for (const auto& e : plan.experts) {
    Json je = {{"layer", e.layer},
               {"expert", e.expert},
               {"shared", e.shared},
               {"width", e.width},
               {"dropped", e.dropped},
               {"stats", {{"gate", to_json(e.gate)}, {"up", to_json(e.up)}, {"down", to_json(e.down)}}}};
    if (!e.parent_dims.empty()) je["parent_dims"] = e.parent_dims;
    experts.push_back(std::move(je));
  }
  return Json{{"ratio", plan.ratio},
              {"seed", plan.seed},
              {"intermediate_size", plan.intermediate_size},
              {"num_layers", plan.num_layers},
              {"num_experts", plan.num_experts},
              {"experts", experts}};
}

inline ReinitPlan reinit_plan_from_json(const Json& j) {
  ReinitPlan plan;
  try {
    plan.ratio = j.at("ratio").get<double>();
    plan.seed = j.at("seed").get<std::uint64_t>();
    plan.intermediate_size = j.at("intermediate_size").get<std::size_t>();
    plan.num_layers = j.at("num_layers").get<std::size_t>();
    plan.num_experts = j.at("num_experts").get<std::size_t>();
    for (const Json& je : j.at("experts")) {
      ExpertPlan e;
      e.layer = je.at("layer").get<std::size_t>();
      e.expert = je.at("expert").get<std::size_t>();
      e.shared = je.value("shared", false);
      e.width = je.at("width").get<std::size_t>();
      e.dropped = je.at("dropped").get<std::vector<std::size_t>>();
      if (je.contains("parent_dims")) e.parent_dims = je.at("parent_dims").get<std::vector<std::size_t>>();
      const Json& st = je.at("stats");
      e.gate = {st.at("gate").at("mu").get<double>(), st.at("gate").at("sigma").get<double>()};
      e.up = {st.at("up").at("mu").get<double>(), st.at("up").at("sigma").get<double>()};
      e.down = {st.at("down").at("mu").get<double>(), st.at("down").at("sigma").get<double>()};
      for (std::size_t d : e.dropped) require(d < e.width, "plan: dropped index out of range");
      require(e.parent_dims.empty() || e.parent_dims.size() == e.width,
              "plan: parent_dims length != width");
      plan.experts.push_back(std::move(e));
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("invalid reinit plan: ") + e.what());
  }
  return plan;
}

struct UpcycleResult {
  Checkpoint checkpoint;
  std::optional<ReinitPlan> plan;
};

namespace detail {

// Stream purposes; the last element of every stream path.
enum Purpose : std::uint64_t {
  kInitTensor = 1,
  kRouterInit = 2,
  kDropIndices = 3,
  kReinitGate = 4,
  kReinitUp = 5,
  kReinitDown = 6,
  kNoiseMask = 7,   // + matrix kind (0..2)
  kNoiseValue = 10,  // + matrix kind (0..2)
  kExpertDims = 13,
};

// Expert slot used in stream paths for the shared expert and the router.
inline constexpr std::uint64_t kSharedSlot = 1ULL << 32;
inline constexpr std::uint64_t kNoExpert = (1ULL << 32) + 1;

inline constexpr double kStdInit = 0.02;
inline constexpr double kRouterBound = 0.0346;

inline RngStream stream(std::uint64_t seed, std::size_t layer, std::uint64_t expert,
                        std::uint64_t purpose) {
  return RngStream(seed, {static_cast<std::uint64_t>(layer), expert, purpose});
}

inline double to_storage(double v) { return static_cast<double>(static_cast<float>(v)); }

// Largest float32-representable magnitude not exceeding `bound`.
inline double storage_bound(double bound) {
  float f = static_cast<float>(bound);
  if (static_cast<double>(f) > bound) f = std::nextafter(f, 0.0f);
  return static_cast<double>(f);
}

inline std::size_t drop_count(double ratio, std::size_t width) {
  // The epsilon keeps products such as 0.57 * 100 from flooring one short.
  return std::min(width, static_cast<std::size_t>(std::floor(ratio * static_cast<double>(width) + 1e-9)));
}

inline FfnWeights dense_ffn(const Checkpoint& dense, std::size_t layer) {
  return {dense.at(names::ffn(layer, "gate")), dense.at(names::ffn(layer, "up")),
          dense.at(names::ffn(layer, "down"))};
}

inline void put_expert(Checkpoint& out, std::size_t layer, std::size_t e, FfnWeights w) {
  out.tensors[names::expert(layer, e, "gate")] = std::move(w.gate);
  out.tensors[names::expert(layer, e, "up")] = std::move(w.up);
  out.tensors[names::expert(layer, e, "down")] = std::move(w.down);
}

inline void put_shared(Checkpoint& out, std::size_t layer, FfnWeights w) {
  out.tensors[names::shared(layer, "gate")] = std::move(w.gate);
  out.tensors[names::shared(layer, "up")] = std::move(w.up);
  out.tensors[names::shared(layer, "down")] = std::move(w.down);
}

inline void check_dense_parent(const Checkpoint& dense, const ModelConfig& moe_config) {
  validate_structure(dense);
  moe_config.validate();
  if (dense.config.is_moe()) throw ValidationError("parent checkpoint must be dense");
  if (!moe_config.is_moe()) throw ValidationError("target config must have num_experts > 0");
  if (!dense.config.same_trunk(moe_config))
    throw ValidationError("config mismatch: target MoE config differs from the dense parent in "
                          "hidden/intermediate/layers/heads/vocab");
}

// Non-FFN tensors copied bitwise from the parent.
inline Checkpoint copy_trunk(const Checkpoint& dense, const ModelConfig& moe_config) {
  Checkpoint out;
  out.config = moe_config;
  for (const auto& [name, m] : dense.tensors)
    if (!names::is_ffn_slot(name)) out.tensors.emplace(name, m);
  return out;
}

// Columns `dims` of gate/up and rows `dims` of down.
inline FfnWeights gather_dims(const FfnWeights& parent, const std::vector<std::size_t>& dims) {
  const std::size_t h = parent.hidden();
  FfnWeights out{Matrix(h, dims.size()), Matrix(h, dims.size()), Matrix(dims.size(), h)};
  for (std::size_t j = 0; j < dims.size(); ++j) {
    for (std::size_t d = 0; d < h; ++d) {
      out.gate(d, j) = parent.gate(d, dims[j]);
      out.up(d, j) = parent.up(d, dims[j]);
      out.down(j, d) = parent.down(dims[j], d);
    }
  }
  return out;
}

// Collects the entries of the selected columns (or rows, when `rows` is set)
// in the same order used for refilling them.
inline std::vector<double> selected_entries(const Matrix& m, const std::vector<std::size_t>& sel,
                                            bool rows) {
  std::vector<double> out;
  if (rows) {
    out.reserve(sel.size() * m.cols());
    for (std::size_t j : sel)
      for (std::size_t d = 0; d < m.cols(); ++d) out.push_back(m(j, d));
  } else {
    out.reserve(sel.size() * m.rows());
    for (std::size_t j : sel)
      for (std::size_t d = 0; d < m.rows(); ++d) out.push_back(m(d, j));
  }
  return out;
}

inline void fill_selected(Matrix& m, const std::vector<std::size_t>& sel, bool rows,
                          const std::vector<double>& values) {
  std::size_t i = 0;
  if (rows) {
    for (std::size_t j : sel)
      for (std::size_t d = 0; d < m.cols(); ++d) m(j, d) = to_storage(values[i++]);
  } else {
    for (std::size_t j : sel)
      for (std::size_t d = 0; d < m.rows(); ++d) m(d, j) = to_storage(values[i++]);
  }
}

// Drop-upcycling of one expert whose intermediate dims were already gathered
// into `w`: pick floor(r * width) local dims shared by all three matrices,
// measure (mu, sigma) of the selected gate/up columns and down rows, and
// resample exactly those entries from N(mu, sigma^2).
inline ExpertPlan reinit_expert(FfnWeights& w, double ratio, std::uint64_t seed, std::size_t layer,
                                std::uint64_t expert_slot) {
  ExpertPlan plan;
  plan.layer = layer;
  plan.width = w.width();
  RngStream idx_stream = stream(seed, layer, expert_slot, kDropIndices);
  plan.dropped = sample_indices_without_replacement(idx_stream, w.width(), drop_count(ratio, w.width()));
  if (plan.dropped.empty()) return plan;

  struct Slot {
    Matrix* m;
    bool rows;
    Purpose purpose;
    NormalParams* params;
  };
  for (Slot s : {Slot{&w.gate, false, kReinitGate, &plan.gate}, Slot{&w.up, false, kReinitUp, &plan.up},
                 Slot{&w.down, true, kReinitDown, &plan.down}}) {
    const auto entries = selected_entries(*s.m, plan.dropped, s.rows);
    *s.params = mean_and_std(entries);
    RngStream rs = stream(seed, layer, expert_slot, s.purpose);
    fill_selected(*s.m, plan.dropped, s.rows, sample_normal(rs, *s.params, entries.size()));
  }
  return plan;
}

inline void scale_up_down(FfnWeights& w, double factor) {
  for (double& v : w.up.values()) v = to_storage(v * factor);
  for (double& v : w.down.values()) v = to_storage(v * factor);
}

inline std::string join_hashes(const std::vector<const Checkpoint*>& parents) {
  std::string out;
  for (const Checkpoint* p : parents) out += (out.empty() ? "" : ",") + content_hash(*p);
  return out;
}

}  // namespace detail

// Router weights: i.i.d. U(-0.0346, 0.0346), i.e. standard deviation 0.02.
inline Matrix router_init(const ModelConfig& config, RngStream& stream) {
  require(config.routed_experts() >= 1, "router_init requires at least one routed expert");
  const double bound = detail::storage_bound(detail::kRouterBound);
  Matrix r(config.hidden_size, config.routed_experts(),
           sample_uniform(stream, -detail::kRouterBound, detail::kRouterBound,
                          config.hidden_size * config.routed_experts()));
  for (double& v : r.values()) v = std::clamp(detail::to_storage(v), -bound, bound);
  return r;
}

inline Matrix router_init_for_layer(const ModelConfig& config, std::uint64_t seed, std::size_t layer) {
  RngStream s = detail::stream(seed, layer, detail::kNoExpert, detail::kRouterInit);
  return router_init(config, s);
}

// Random initialization: N(0, 0.02^2) everywhere except norm gains (1) and
// routers (router_init).
inline Checkpoint from_scratch(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Checkpoint out;
  out.config = config;
  out.metadata.method = method_name(Method::kFromScratch);
  out.metadata.seed = seed;
  for (const TensorSpec& spec : tensor_layout(config)) {
    if (spec.name.ends_with("norm")) {
      out.tensors.emplace(spec.name, Matrix(spec.rows, spec.cols, 1.0));
      continue;
    }
    if (spec.name.ends_with(".router")) {
      const std::size_t layer = std::stoul(spec.name.substr(7));
      out.tensors.emplace(spec.name, router_init_for_layer(config, seed, layer));
      continue;
    }
    RngStream s(seed, {fnv1a64(spec.name), detail::kNoExpert, detail::kInitTensor});
    Matrix m(spec.rows, spec.cols, sample_normal(s, {0.0, detail::kStdInit}, spec.size()));
    round_to_storage(m);
    out.tensors.emplace(spec.name, std::move(m));
  }
  return out;
}

// Every expert is a bitwise copy of the parent FFN; routers are fresh.
inline Checkpoint naive_upcycle(const Checkpoint& dense, const ModelConfig& config,
                                std::uint64_t seed = 0) {
  detail::check_dense_parent(dense, config);
  require(config.granularity == 1 && config.shared_experts == 0,
          "naive upcycling requires granularity 1 and no shared experts");
  Checkpoint out = detail::copy_trunk(dense, config);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    out.tensors[names::router(l)] = router_init_for_layer(config, seed, l);
    const FfnWeights parent = detail::dense_ffn(dense, l);
    for (std::size_t e = 0; e < config.num_experts; ++e) detail::put_expert(out, l, e, parent);
  }
  out.metadata = {method_name(Method::kNaive), 0.0, seed, content_hash(dense), Json::object()};
  return out;
}

// Naive copy, then each element of each expert matrix is perturbed with
// N(0, noise_sigma^2) with probability noise_fraction.
inline Checkpoint random_noise_upcycle(const Checkpoint& dense, const ModelConfig& config,
                                       const UpcycleSpec& spec) {
  spec.validate();
  Checkpoint out = naive_upcycle(dense, config, spec.seed);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    for (std::size_t e = 0; e < config.num_experts; ++e) {
      for (std::uint64_t kind = 0; kind < 3; ++kind) {
        Matrix& m = out.at(names::expert(l, e, names::kFfnKinds[kind]));
        RngStream mask = detail::stream(spec.seed, l, e, detail::kNoiseMask + kind);
        std::vector<std::size_t> hit;
        for (std::size_t i = 0; i < m.size(); ++i)
          if (mask.next_double() < spec.noise_fraction) hit.push_back(i);
        RngStream noise_stream = detail::stream(spec.seed, l, e, detail::kNoiseValue + kind);
        const auto noise = sample_normal(noise_stream, {0.0, spec.noise_sigma}, hit.size());
        for (std::size_t i = 0; i < hit.size(); ++i)
          m.values()[hit[i]] = detail::to_storage(m.values()[hit[i]] + noise[i]);
      }
    }
  }
  out.metadata.method = method_name(Method::kRandomNoise);
  out.metadata.extra = {{"noise_sigma", spec.noise_sigma}, {"noise_fraction", spec.noise_fraction}};
  return out;
}

inline UpcycleResult fine_grained_drop_upcycle(const Checkpoint& dense, const ModelConfig& config,
                                               const UpcycleSpec& spec);

// Drop-upcycling: naive replication followed by re-initialization of
// floor(r * d_f) intermediate dims per expert.
inline UpcycleResult drop_upcycle(const Checkpoint& dense, const ModelConfig& config,
                                  const UpcycleSpec& spec) {
  require(config.granularity == 1 && config.shared_experts == 0,
          "drop upcycling requires granularity 1 and no shared experts (use fg-drop)");
  UpcycleSpec s = spec;
  s.scale_factor.reset();
  auto result = fine_grained_drop_upcycle(dense, config, s);
  result.checkpoint.metadata.method = method_name(Method::kDrop);
  result.checkpoint.metadata.extra = Json::object();
  return result;
}

// Fine-grained drop-upcycling. Each routed expert first samples
// d_f / m parent dims, then drops floor(r * d_f / m) of them as in
// drop_upcycle. The shared block samples d_f / m * k_s dims and either copies
// them or drop-upcycles them. With m = 1 and k_s = 0 this is drop_upcycle.
inline UpcycleResult fine_grained_drop_upcycle(const Checkpoint& dense, const ModelConfig& config,
                                               const UpcycleSpec& spec) {
  spec.validate();
  detail::check_dense_parent(dense, config);
  const std::size_t d_f = config.intermediate_size;
  const std::size_t width = config.expert_size();

  Checkpoint out = detail::copy_trunk(dense, config);
  ReinitPlan plan;
  plan.ratio = spec.ratio;
  plan.seed = spec.seed;
  plan.intermediate_size = d_f;
  plan.num_layers = config.num_layers;
  plan.num_experts = config.routed_experts();

  for (std::size_t l = 0; l < config.num_layers; ++l) {
    out.tensors[names::router(l)] = router_init_for_layer(config, spec.seed, l);
    const FfnWeights parent = detail::dense_ffn(dense, l);
    for (std::size_t e = 0; e < config.routed_experts(); ++e) {
      std::vector<std::size_t> dims;
      FfnWeights w;
      if (width == d_f) {
        w = parent;
      } else {
        RngStream ds = detail::stream(spec.seed, l, e, detail::kExpertDims);
        dims = sample_indices_without_replacement(ds, d_f, width);
        w = detail::gather_dims(parent, dims);
      }
      ExpertPlan ep = detail::reinit_expert(w, spec.ratio, spec.seed, l, e);
      ep.expert = e;
      ep.parent_dims = std::move(dims);
      if (spec.scale_factor) detail::scale_up_down(w, *spec.scale_factor);
      detail::put_expert(out, l, e, std::move(w));
      plan.experts.push_back(std::move(ep));
    }
    if (config.shared_experts > 0) {
      RngStream ds = detail::stream(spec.seed, l, detail::kSharedSlot, detail::kExpertDims);
      auto dims = sample_indices_without_replacement(ds, d_f, config.shared_size());
      FfnWeights w = detail::gather_dims(parent, dims);
      ExpertPlan ep;
      if (spec.shared_init == SharedInit::kDrop) {
        ep = detail::reinit_expert(w, spec.ratio, spec.seed, l, detail::kSharedSlot);
      } else {
        ep.layer = l;
        ep.width = w.width();
      }
      ep.shared = true;
      ep.parent_dims = std::move(dims);
      if (spec.scale_factor) detail::scale_up_down(w, *spec.scale_factor);
      detail::put_shared(out, l, std::move(w));
      plan.experts.push_back(std::move(ep));
    }
  }
  Json extra = {{"granularity", config.granularity},
                {"shared_experts", config.shared_experts},
                {"shared_init", shared_init_name(spec.shared_init)}};
  extra["scale_factor"] = spec.scale_factor ? Json(*spec.scale_factor) : Json(nullptr);
  out.metadata = {method_name(Method::kFineGrainedDrop), spec.ratio, spec.seed,
                  content_hash(dense), extra};
  return {std::move(out), std::move(plan)};
}

// Branch-Train-MiX: non-FFN tensors averaged over all input models; each
// model's FFN becomes two consecutive experts [m0, m0, m1, m1, ...].
inline Checkpoint btx_merge(const Checkpoint& seed_dense, const std::vector<Checkpoint>& branches,
                            const ModelConfig& config, std::uint64_t seed = 0) {
  std::vector<const Checkpoint*> models{&seed_dense};
  for (const auto& b : branches) models.push_back(&b);
  for (const Checkpoint* m : models) detail::check_dense_parent(*m, config);
  require(config.granularity == 1 && config.shared_experts == 0,
          "btx requires granularity 1 and no shared experts");
  if (config.num_experts != 2 * models.size())
    throw ValidationError("btx: num_experts (" + std::to_string(config.num_experts) +
                          ") must be 2 x number of input models (" +
                          std::to_string(models.size()) + ")");

  Checkpoint out = detail::copy_trunk(seed_dense, config);
  const double count = static_cast<double>(models.size());
  for (auto& [name, merged] : out.tensors) {
    // mean = x0 + sum_i (x_i - x0) / N, exact when all inputs agree.
    Matrix delta(merged.rows(), merged.cols());
    for (std::size_t i = 1; i < models.size(); ++i) {
      const Matrix& m = models[i]->at(name);
      for (std::size_t j = 0; j < m.size(); ++j) delta.values()[j] += m.values()[j] - merged.values()[j];
    }
    for (std::size_t j = 0; j < merged.size(); ++j) merged.values()[j] += delta.values()[j] / count;
  }
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    out.tensors[names::router(l)] = router_init_for_layer(config, seed, l);
    for (std::size_t i = 0; i < models.size(); ++i) {
      const FfnWeights ffn = detail::dense_ffn(*models[i], l);
      detail::put_expert(out, l, 2 * i, ffn);
      detail::put_expert(out, l, 2 * i + 1, ffn);
    }
  }
  out.metadata = {method_name(Method::kBtx), 0.0, seed, detail::join_hashes(models),
                  Json{{"num_models", models.size()}}};
  return out;
}

// Dispatches on spec.method. `parents` holds the dense parent first, then any
// BTX branches; from-scratch ignores it.
inline UpcycleResult upcycle(const std::vector<Checkpoint>& parents, const ModelConfig& config,
                             const UpcycleSpec& spec) {
  spec.validate();
  require(spec.granularity == config.granularity && spec.shared == config.shared_experts,
          "upcycle spec granularity/shared (" + std::to_string(spec.granularity) + "/" +
              std::to_string(spec.shared) + ") must match the target config (" +
              std::to_string(config.granularity) + "/" + std::to_string(config.shared_experts) + ")");
  if (spec.method == Method::kFromScratch) return {from_scratch(config, spec.seed), std::nullopt};
  require(!parents.empty(), "upcycle requires a dense parent checkpoint");
  const Checkpoint& dense = parents.front();
  if (spec.method != Method::kBtx)
    require(parents.size() == 1, "only btx accepts more than one input checkpoint");
  switch (spec.method) {
    case Method::kNaive: return {naive_upcycle(dense, config, spec.seed), std::nullopt};
    case Method::kRandomNoise: return {random_noise_upcycle(dense, config, spec), std::nullopt};
    case Method::kDrop: return drop_upcycle(dense, config, spec);
    case Method::kFineGrainedDrop: return fine_grained_drop_upcycle(dense, config, spec);
    case Method::kBtx: {
      std::vector<Checkpoint> branches(parents.begin() + 1, parents.end());
      return {btx_merge(dense, branches, config, spec.seed), std::nullopt};
    }
    case Method::kFromScratch: break;
  }
  throw ValidationError("unsupported method");
}

}  // namespace moeup
