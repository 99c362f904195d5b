// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Writes toy checkpoints plus token sequences and the library's loss and
// logits for them, for an out-of-process reference implementation to check.

#include <fstream>
#include <iostream>

#include "moeup/checkpoint.hpp"
#include "moeup/toy_lm.hpp"
#include "support.hpp"

using namespace moeup;

namespace {

void emit(const ModelConfig& config, std::uint64_t seed, const std::filesystem::path& dir) {
  save(testing::random_checkpoint(config, seed, 0.25), dir);
  const ToyLm model = from_checkpoint(load(dir));
  testing::Gen g(seed + 100);
  Json cases = Json::array();
  for (std::size_t len : {1u, 2u, 7u, 13u}) {
    std::vector<std::uint32_t> tokens(len);
    for (auto& t : tokens) t = static_cast<std::uint32_t>(g.index(config.vocab_size));
    const LmCache cache = lm_forward_cached(model, tokens);
    Json logits = Json::array();
    for (std::size_t t = 0; t < len; ++t) {
      const auto row = cache.logits.row(t);
      logits.push_back(std::vector<double>(row.begin(), row.end()));
    }
    cases.push_back({{"tokens", tokens}, {"loss", cache.loss}, {"logits", logits}});
  }
  std::ofstream(dir / "cases.json") << cases.dump();
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: toy_lm_fixture OUT_DIR\n";
    return 1;
  }
  const std::filesystem::path root = argv[1];
  ModelConfig dense = testing::toy_dense(2, 16, 32, 2, 23);
  emit(dense, 1, root / "dense");

  ModelConfig moe = testing::toy_dense(2, 16, 32, 4, 19);
  moe.num_query_groups = 2;
  moe.num_experts = 3;
  moe.granularity = 2;
  moe.shared_experts = 1;
  moe.top_k = 2;
  emit(moe, 2, root / "moe");
  std::cout << root.string() << "\n";
  return 0;
}
