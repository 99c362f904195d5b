// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>

#include "moeup/accounting.hpp"
#include "moeup/checkpoint.hpp"
#include "support.hpp"

namespace moeup {
namespace {

using testing::random_checkpoint;
using testing::temp_dir;
using testing::toy_dense;
using testing::toy_moe;

ModelConfig dense_152m() {
  ModelConfig c;
  c.hidden_size = 512;
  c.intermediate_size = 2048;
  c.num_layers = 12;
  c.num_heads = 8;
  c.num_query_groups = 8;
  c.head_dim = 64;
  c.vocab_size = 99574;
  return c;
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

TEST(Config, JsonRoundTrip) {
  ModelConfig c = toy_moe(8, 2);
  c.granularity = 2;
  c.shared_experts = 1;
  c.num_query_groups = 1;
  EXPECT_EQ(model_config_from_json(to_json(c)), c);
}

TEST(Config, DefaultsAndUnknownKeys) {
  const ModelConfig c = model_config_from_json(Json::parse(
      R"({"hidden_size": 8, "intermediate_size": 16, "num_layers": 1, "num_heads": 2, "vocab_size": 5})"));
  EXPECT_EQ(c.head_dim, 4u);
  EXPECT_EQ(c.num_query_groups, 2u);
  EXPECT_THROW(model_config_from_json(Json::parse(
                   R"({"hidden_size": 8, "intermediate_size": 16, "num_layers": 1,
                       "num_heads": 2, "vocab_size": 5, "hiden": 3})")),
               ValidationError);
}

TEST(Config, Invariants) {
  ModelConfig c = toy_moe(4, 2);
  c.top_k = 5;
  EXPECT_THROW(c.validate(), ValidationError);
  c = toy_moe(4, 2);
  c.granularity = 3;  // 32 % 3 != 0
  EXPECT_THROW(c.validate(), ValidationError);
  c = toy_moe(4, 2);
  c.shared_experts = 4;
  EXPECT_THROW(c.validate(), ValidationError);
  c = toy_dense();
  c.num_query_groups = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = toy_dense();
  c.head_dim = 3;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Layout, NamesAreDistinctAndMatchParamCount) {
  for (ModelConfig c : {toy_dense(), toy_moe(4, 2), toy_moe(8, 3, 3)}) {
    const auto layout = tensor_layout(c);
    std::set<std::string> names;
    std::uint64_t total = 0;
    for (const auto& s : layout) {
      names.insert(s.name);
      total += s.size();
    }
    EXPECT_EQ(names.size(), layout.size());
    EXPECT_EQ(total, count_params(c).total);
  }
}

TEST(Layout, Dense152mTensorInventory) {
  const auto layout = tensor_layout(dense_152m());
  std::size_t embed = 0, head = 0, attn = 0, ffn = 0, norms = 0;
  std::uint64_t total = 0;
  for (const auto& s : layout) {
    total += s.size();
    if (s.name == "embed") ++embed;
    else if (s.name == "head") ++head;
    else if (s.name.find(".attn.") != std::string::npos) ++attn;
    else if (s.name.find(".ffn.") != std::string::npos) ++ffn;
    else if (s.name.ends_with("norm")) ++norms;
  }
  EXPECT_EQ(embed, 1u);
  EXPECT_EQ(head, 1u);
  EXPECT_EQ(attn, 12u * 4);
  EXPECT_EQ(ffn, 12u * 3);
  EXPECT_EQ(norms, 12u * 2 + 1);
  EXPECT_EQ(layout.size(), 1 + 1 + 48 + 36 + 25u);
  EXPECT_NEAR(static_cast<double>(total), 152e6, 0.005 * 152e6);
}

TEST(Layout, Moe8x152mReports417m) {
  ModelConfig c = dense_152m();
  c.num_experts = 8;
  c.top_k = 2;
  std::uint64_t total = 0;
  std::size_t routers = 0;
  for (const auto& s : tensor_layout(c)) {
    total += s.size();
    routers += s.name.ends_with(".router");
  }
  EXPECT_EQ(routers, 12u);
  EXPECT_NEAR(static_cast<double>(total), 417e6, 0.005 * 417e6);
}

TEST(Save, RoundTripIsBitwise) {
  for (ModelConfig c : {toy_dense(), toy_moe(4, 2)}) {
    Checkpoint ck = random_checkpoint(c, 3);
    ck.metadata = {"drop", 0.5, 9, "abc", Json{{"note", 1}}};
    const auto dir = temp_dir("roundtrip");
    save(ck, dir);
    const Checkpoint back = load(dir);
    EXPECT_TRUE(bitwise_equal(ck, back));
    EXPECT_EQ(back.metadata, ck.metadata);
    EXPECT_EQ(content_hash(back), content_hash(ck));
  }
}

TEST(Save, ManifestLayout) {
  const Checkpoint ck = random_checkpoint(toy_moe(4, 2), 4);
  const auto dir = temp_dir("manifest");
  save(ck, dir);
  const Json m = read_manifest(dir);
  EXPECT_EQ(m.at("format_version"), 1);
  std::size_t expected_offset = 0;
  for (const auto& t : m.at("tensors")) {
    const auto offset = t.at("offset").get<std::size_t>();
    EXPECT_EQ(offset % 64, 0u);
    EXPECT_EQ(offset, expected_offset);
    const auto nbytes = t.at("nbytes").get<std::size_t>();
    EXPECT_EQ(nbytes, t.at("shape")[0].get<std::size_t>() * t.at("shape")[1].get<std::size_t>() * 4);
    EXPECT_EQ(t.at("checksum").get<std::string>().rfind("fnv1a64:", 0), 0u);
    expected_offset = (offset + nbytes + 63) / 64 * 64;
  }
  EXPECT_EQ(std::filesystem::file_size(dir / "tensors.bin"), m.at("blob_bytes").get<std::size_t>());
}

TEST(Save, LittleEndianRowMajorBytes) {
  ModelConfig c = toy_dense(1, 4, 8, 1, 3);
  Checkpoint ck = random_checkpoint(c, 5);
  ck.tensors.at("embed")(0, 1) = 1.0;  // 0x3f800000
  const auto dir = temp_dir("bytes");
  save(ck, dir);
  std::ifstream in(dir / "tensors.bin", std::ios::binary);
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  EXPECT_EQ(b[4], 0x00);
  EXPECT_EQ(b[5], 0x00);
  EXPECT_EQ(b[6], 0x80);
  EXPECT_EQ(b[7], 0x3f);
}

TEST(Save, RejectsNonFinite) {
  Checkpoint ck = random_checkpoint(toy_dense(), 6);
  ck.tensors.at("head")(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(save(ck, temp_dir("inf")), ValidationError);
}

TEST(Load, ChecksumMismatchIsCorruptTensor) {
  const Checkpoint ck = random_checkpoint(toy_dense(), 7);
  const auto dir = temp_dir("corrupt");
  save(ck, dir);
  {
    std::fstream f(dir / "tensors.bin", std::ios::binary | std::ios::in | std::ios::out);
    f.seekp(10);
    f.put('\x5a');
  }
  const std::string msg = error_of([&] { load(dir); });
  EXPECT_NE(msg.find("corrupt tensor"), std::string::npos) << msg;
  EXPECT_THROW(load(dir), IoError);
}

TEST(Load, MissingExpertIsReported) {
  ModelConfig c = toy_moe(8, 2);
  const Checkpoint ck = random_checkpoint(c, 8);
  const auto dir = temp_dir("missing");
  save(ck, dir);
  Json m = read_manifest(dir);
  Json kept = Json::array();
  for (const auto& t : m.at("tensors"))
    if (t.at("name").get<std::string>().find("experts.7.") == std::string::npos) kept.push_back(t);
  m["tensors"] = kept;
  std::ofstream(dir / "manifest.json") << m.dump();
  const std::string msg = error_of([&] { load(dir); });
  EXPECT_NE(msg.find("missing tensor"), std::string::npos) << msg;
}

TEST(Load, DenseWithRouterIsRejected) {
  Checkpoint ck = random_checkpoint(toy_dense(), 9);
  ck.tensors.emplace("layers.0.router", Matrix(16, 4, 0.0));
  EXPECT_EQ(error_of([&] { validate_structure(ck); }), "dense checkpoint contains router");
}

TEST(Load, ShapeMismatchAndExtras) {
  Checkpoint ck = random_checkpoint(toy_dense(), 10);
  ck.tensors.at("head") = Matrix(3, 3, 0.0);
  EXPECT_NE(error_of([&] { validate_structure(ck); }).find("shape mismatch"), std::string::npos);
  ck = random_checkpoint(toy_dense(), 10);
  ck.tensors.emplace("bogus", Matrix(1, 1, 0.0));
  EXPECT_NE(error_of([&] { validate_structure(ck); }).find("unexpected tensor"), std::string::npos);
}

TEST(Load, MissingDirectoryIsIoError) {
  EXPECT_THROW(load(temp_dir("empty") / "nope"), IoError);
}

TEST(Save, RandomCheckpointsRoundTrip) {
  testing::Gen g(11);
  for (int t = 0; t < 10; ++t) {
    ModelConfig c = g.index(2) ? toy_moe(2 + g.index(4), 1, 1 + g.index(2)) : toy_dense(1 + g.index(3));
    const Checkpoint ck = random_checkpoint(c, 100 + t, g.uniform(0.01, 10.0));
    const auto dir = temp_dir("prop");
    save(ck, dir);
    EXPECT_TRUE(bitwise_equal(ck, load(dir)));
  }
}

}  // namespace
}  // namespace moeup
