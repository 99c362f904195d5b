// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor checkpoints for dense and MoE models.
//
// On disk a checkpoint is a directory holding
//   manifest.json  config, provenance metadata and the tensor index
//   tensors.bin    every tensor as little-endian IEEE-754 float32, row-major,
//                  each tensor starting on a 64-byte boundary (zero padded)
//
// Canonical tensor names (i = layer, e = routed expert index):
//   embed                      vocab x hidden
//   layers.i.attn_norm         1 x hidden
//   layers.i.attn.q            hidden x (heads * head_dim)
//   layers.i.attn.k            hidden x (query_groups * head_dim)
//   layers.i.attn.v            hidden x (query_groups * head_dim)
//   layers.i.attn.o            (heads * head_dim) x hidden
//   layers.i.ffn_norm          1 x hidden
//   layers.i.ffn.{gate,up}     hidden x intermediate          (dense only)
//   layers.i.ffn.down          intermediate x hidden          (dense only)
//   layers.i.router            hidden x routed_experts        (MoE only)
//   layers.i.experts.e.{gate,up}  hidden x expert_size        (MoE only)
//   layers.i.experts.e.down       expert_size x hidden        (MoE only)
//   layers.i.shared.{gate,up,down}  as above, width shared_size (shared > 0)
//   final_norm                 1 x hidden
//   head                       hidden x vocab

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "moeup/config.hpp"
#include "moeup/numerics.hpp"

namespace moeup {

namespace names {

inline std::string layer(std::size_t i) { return "layers." + std::to_string(i) + "."; }
inline std::string attn(std::size_t i, const char* which) {
  return layer(i) + "attn." + which;
}
inline std::string attn_norm(std::size_t i) { return layer(i) + "attn_norm"; }
inline std::string ffn_norm(std::size_t i) { return layer(i) + "ffn_norm"; }
inline std::string ffn(std::size_t i, const char* kind) { return layer(i) + "ffn." + kind; }
inline std::string router(std::size_t i) { return layer(i) + "router"; }
inline std::string expert(std::size_t i, std::size_t e, const char* kind) {
  return layer(i) + "experts." + std::to_string(e) + "." + kind;
}
inline std::string shared(std::size_t i, const char* kind) { return layer(i) + "shared." + kind; }

inline constexpr const char* kEmbed = "embed";
inline constexpr const char* kFinalNorm = "final_norm";
inline constexpr const char* kHead = "head";
inline constexpr const char* kFfnKinds[3] = {"gate", "up", "down"};

inline bool is_ffn_slot(const std::string& name) {
  return name.find(".ffn.") != std::string::npos || name.find(".experts.") != std::string::npos ||
         name.find(".shared.") != std::string::npos ||
         (name.size() > 7 && name.compare(name.size() - 7, 7, ".router") == 0);
}

}  // namespace names

struct TensorSpec {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

// Every tensor implied by `config`, in canonical (manifest) order.
inline std::vector<TensorSpec> tensor_layout(const ModelConfig& config) {
  config.validate();
  const std::size_t h = config.hidden_size;
  std::vector<TensorSpec> out;
  out.push_back({names::kEmbed, config.vocab_size, h});
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    out.push_back({names::attn_norm(i), 1, h});
    out.push_back({names::attn(i, "q"), h, config.q_width()});
    out.push_back({names::attn(i, "k"), h, config.kv_width()});
    out.push_back({names::attn(i, "v"), h, config.kv_width()});
    out.push_back({names::attn(i, "o"), config.q_width(), h});
    out.push_back({names::ffn_norm(i), 1, h});
    if (!config.is_moe()) {
      out.push_back({names::ffn(i, "gate"), h, config.intermediate_size});
      out.push_back({names::ffn(i, "up"), h, config.intermediate_size});
      out.push_back({names::ffn(i, "down"), config.intermediate_size, h});
      continue;
    }
    out.push_back({names::router(i), h, config.routed_experts()});
    const std::size_t w = config.expert_size();
    for (std::size_t e = 0; e < config.routed_experts(); ++e) {
      out.push_back({names::expert(i, e, "gate"), h, w});
      out.push_back({names::expert(i, e, "up"), h, w});
      out.push_back({names::expert(i, e, "down"), w, h});
    }
    if (config.shared_experts > 0) {
      const std::size_t s = config.shared_size();
      out.push_back({names::shared(i, "gate"), h, s});
      out.push_back({names::shared(i, "up"), h, s});
      out.push_back({names::shared(i, "down"), s, h});
    }
  }
  out.push_back({names::kFinalNorm, 1, h});
  out.push_back({names::kHead, h, config.vocab_size});
  return out;
}

// How a checkpoint was produced.
struct Provenance {
  std::string method = "unknown";
  double ratio = 0.0;
  std::uint64_t seed = 0;
  std::string parent_hash;
  Json extra = Json::object();

  bool operator==(const Provenance&) const = default;
};

inline Json to_json(const Provenance& p) {
  return Json{{"method", p.method},
              {"ratio", p.ratio},
              {"seed", p.seed},
              {"parent_hash", p.parent_hash},
              {"extra", p.extra}};
}

inline Provenance provenance_from_json(const Json& j) {
  Provenance p;
  p.method = j.value("method", std::string("unknown"));
  p.ratio = j.value("ratio", 0.0);
  p.seed = j.value("seed", std::uint64_t{0});
  p.parent_hash = j.value("parent_hash", std::string());
  p.extra = j.value("extra", Json::object());
  return p;
}

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Matrix> tensors;
  Provenance metadata;

  const Matrix& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("missing tensor: " + name);
    return it->second;
  }
  Matrix& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ValidationError("missing tensor: " + name);
    return it->second;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : tensors) n += m.size();
    return n;
  }
};

inline bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.config != b.config || a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, m] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || !bitwise_equal(m, it->second)) return false;
  }
  return true;
}

// Checks that the tensor set is exactly the layout implied by the config.
inline void validate_structure(const Checkpoint& ckpt) {
  ckpt.config.validate();
  if (!ckpt.config.is_moe()) {
    for (const auto& [name, _] : ckpt.tensors) {
      if (name.ends_with(".router")) throw ValidationError("dense checkpoint contains router");
      if (name.find(".experts.") != std::string::npos || name.find(".shared.") != std::string::npos)
        throw ValidationError("dense checkpoint contains expert tensor " + name);
    }
  }
  const auto layout = tensor_layout(ckpt.config);
  for (const TensorSpec& spec : layout) {
    auto it = ckpt.tensors.find(spec.name);
    if (it == ckpt.tensors.end()) throw ValidationError("missing tensor: " + spec.name);
    if (it->second.rows() != spec.rows || it->second.cols() != spec.cols)
      throw ValidationError("shape mismatch for " + spec.name + ": expected [" +
                            std::to_string(spec.rows) + "x" + std::to_string(spec.cols) +
                            "], got " + shape_string(it->second));
  }
  if (ckpt.tensors.size() != layout.size()) {
    std::set<std::string> expected;
    for (const auto& s : layout) expected.insert(s.name);
    for (const auto& [name, _] : ckpt.tensors)
      if (!expected.count(name)) throw ValidationError("unexpected tensor: " + name);
  }
}

// Values as they will be stored: every element rounded to float32.
inline void round_to_storage(Matrix& m) {
  for (double& v : m.values()) v = static_cast<double>(static_cast<float>(v));
}

namespace detail {

inline constexpr std::size_t kAlignment = 64;
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";
inline constexpr const char* kFormatName = "moeup-checkpoint";
inline constexpr int kFormatVersion = 1;

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

inline std::vector<std::byte> encode_tensor(const Matrix& m) {
  std::vector<std::byte> bytes(m.size() * 4);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const float f = static_cast<float>(m.values()[i]);
    const std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(f));
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  return bytes;
}

inline Matrix decode_tensor(const std::byte* bytes, std::size_t rows, std::size_t cols) {
  std::vector<double> data(rows * cols);
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes + 4 * i, 4);
    data[i] = static_cast<double>(std::bit_cast<float>(to_little_endian(bits)));
  }
  return Matrix(rows, cols, std::move(data));
}

inline std::string checksum_string(std::span<const std::byte> bytes) {
  return "fnv1a64:" + hex64(fnv1a64(bytes));
}

}  // namespace detail

// Hash over the stored representation (names, shapes, float32 bytes) in
// canonical order. Used as the parent reference in derived checkpoints.
inline std::string content_hash(const Checkpoint& ckpt) {
  std::uint64_t h = fnv1a64(to_json(ckpt.config).dump());
  for (const TensorSpec& spec : tensor_layout(ckpt.config)) {
    auto it = ckpt.tensors.find(spec.name);
    if (it == ckpt.tensors.end()) continue;
    h = fnv1a64(spec.name, h);
    const auto bytes = detail::encode_tensor(it->second);
    h = fnv1a64(bytes, h);
  }
  return hex64(h);
}

// Writes `ckpt` to directory `dir` (created if needed). Values are stored as
// float32; NaN/Inf are rejected.
inline void save(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  validate_structure(ckpt);
  for (const auto& [name, m] : ckpt.tensors)
    if (!m.all_finite()) throw ValidationError("non-finite value in tensor " + name);

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());

  std::ofstream blob(dir / detail::kBlobFile, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot open " + (dir / detail::kBlobFile).string());

  Json index = Json::array();
  std::size_t offset = 0;
  static const char kZeros[detail::kAlignment] = {};
  for (const TensorSpec& spec : tensor_layout(ckpt.config)) {
    const auto bytes = detail::encode_tensor(ckpt.tensors.at(spec.name));
    blob.write(reinterpret_cast<const char*>(bytes.data()),
               static_cast<std::streamsize>(bytes.size()));
    index.push_back({{"name", spec.name},
                     {"dtype", "float32"},
                     {"shape", {spec.rows, spec.cols}},
                     {"offset", offset},
                     {"nbytes", bytes.size()},
                     {"checksum", detail::checksum_string(bytes)}});
    offset += bytes.size();
    const std::size_t pad = (detail::kAlignment - offset % detail::kAlignment) % detail::kAlignment;
    blob.write(kZeros, static_cast<std::streamsize>(pad));
    offset += pad;
  }
  blob.close();
  if (!blob) throw IoError("failed writing " + (dir / detail::kBlobFile).string());

  Json manifest = {{"format", detail::kFormatName},
                   {"format_version", detail::kFormatVersion},
                   {"config", to_json(ckpt.config)},
                   {"metadata", to_json(ckpt.metadata)},
                   {"blob", detail::kBlobFile},
                   {"blob_bytes", offset},
                   {"tensors", index}};
  std::ofstream out(dir / detail::kManifestFile, std::ios::trunc);
  if (!out) throw IoError("cannot open " + (dir / detail::kManifestFile).string());
  out << manifest.dump(2) << "\n";
  out.close();
  if (!out) throw IoError("failed writing " + (dir / detail::kManifestFile).string());
}

inline Json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / detail::kManifestFile);
  if (!in) throw IoError("cannot open " + (dir / detail::kManifestFile).string());
  try {
    Json manifest = Json::parse(in);
    if (manifest.value("format", std::string()) != detail::kFormatName)
      throw IoError("not a moeup checkpoint: " + dir.string());
    return manifest;
  } catch (const Json::exception& e) {
    throw IoError("unreadable manifest in " + dir.string() + ": " + e.what());
  }
}

// Loads and validates a checkpoint directory written by save().
inline Checkpoint load(const std::filesystem::path& dir) {
  const Json manifest = read_manifest(dir);
  Checkpoint ckpt;
  ckpt.config = model_config_from_json(manifest.at("config"));
  ckpt.metadata = provenance_from_json(manifest.value("metadata", Json::object()));

  const auto blob_path = dir / manifest.value("blob", std::string(detail::kBlobFile));
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + blob_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* base = reinterpret_cast<const std::byte*>(blob.data());

  try {
    for (const Json& entry : manifest.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "float32")
        throw IoError("unsupported dtype for " + name);
      const auto rows = entry.at("shape").at(0).get<std::size_t>();
      const auto cols = entry.at("shape").at(1).get<std::size_t>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      if (nbytes != rows * cols * 4 || offset + nbytes > blob.size())
        throw IoError("corrupt tensor: " + name + " (extent outside blob)");
      std::span<const std::byte> bytes(base + offset, nbytes);
      if (detail::checksum_string(bytes) != entry.at("checksum").get<std::string>())
        throw IoError("corrupt tensor: " + name + " (checksum mismatch)");
      if (!ckpt.tensors.emplace(name, detail::decode_tensor(bytes.data(), rows, cols)).second)
        throw IoError("duplicate tensor: " + name);
    }
  } catch (const Json::exception& e) {
    throw IoError("malformed tensor index in " + dir.string() + ": " + e.what());
  }
  validate_structure(ckpt);
  return ckpt;
}

}  // namespace moeup
