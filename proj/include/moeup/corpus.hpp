// Copyright 2026 The moeup Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic three-domain corpus over a 64-token vocabulary:
//   lang_a  tokens  0..23  first-order Markov chain
//   lang_b  tokens 24..47  a differently wired Markov chain
//   code    tokens 48..63  bracket-structured pseudo-code
//             48..51 open brackets, 52..55 matching closers, 56..63 identifiers
//
// File format: one sequence per line, "<domain>\t<id> <id> ...".

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "moeup/error.hpp"
#include "moeup/numerics.hpp"

namespace moeup {

inline constexpr std::size_t kCorpusVocab = 64;

struct Sequence {
  std::string domain;
  std::vector<std::uint32_t> tokens;

  bool operator==(const Sequence&) const = default;
};

struct Corpus {
  std::vector<Sequence> sequences;

  bool empty() const { return sequences.empty(); }
  std::size_t size() const { return sequences.size(); }
  bool operator==(const Corpus&) const = default;
};

namespace detail {

inline std::uint32_t markov_next(RngStream& rng, std::uint32_t prev, std::uint32_t base,
                                 std::uint32_t mult, std::uint32_t shift) {
  static constexpr std::array<double, 4> kCdf = {0.6, 0.85, 0.95, 1.0};
  const double u = rng.next_double();
  std::uint32_t branch = 0;
  while (u >= kCdf[branch]) ++branch;
  const std::uint32_t local = prev - base;
  return base + (mult * local + shift + 7 * branch) % 24;
}

inline std::vector<std::uint32_t> markov_sequence(RngStream& rng, std::size_t length,
                                                  std::uint32_t base, std::uint32_t mult,
                                                  std::uint32_t shift) {
  std::vector<std::uint32_t> out;
  if (length == 0) return out;
  out.push_back(base + static_cast<std::uint32_t>(rng.next_below(24)));
  while (out.size() < length) out.push_back(markov_next(rng, out.back(), base, mult, shift));
  return out;
}

inline std::vector<std::uint32_t> code_sequence(RngStream& rng, std::size_t length) {
  std::vector<std::uint32_t> out;
  std::vector<std::uint32_t> stack;
  std::uint32_t ident = static_cast<std::uint32_t>(rng.next_below(8));
  while (out.size() < length) {
    const double u = rng.next_double();
    const std::size_t remaining = length - out.size();
    if (!stack.empty() && (u < 0.3 || remaining <= stack.size())) {
      out.push_back(52 + stack.back());
      stack.pop_back();
    } else if (u < 0.55 && stack.size() < 4 && remaining > stack.size() + 1) {
      const auto kind = static_cast<std::uint32_t>(rng.next_below(4));
      stack.push_back(kind);
      out.push_back(48 + kind);
    } else {
      ident = rng.next_double() < 0.7 ? (ident + 3) % 8 : static_cast<std::uint32_t>(rng.next_below(8));
      out.push_back(56 + ident);
    }
  }
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& corpus_domains() {
  static const std::vector<std::string> kDomains = {"lang_a", "lang_b", "code"};
  return kDomains;
}

// `per_domain` sequences of `length` tokens per domain, interleaved
// lang_a, lang_b, code, lang_a, ...
inline Corpus generate_corpus(std::uint64_t seed, std::size_t per_domain, std::size_t length) {
  Corpus c;
  for (std::size_t i = 0; i < per_domain; ++i) {
    RngStream a(seed, {0, i}), b(seed, {1, i}), code(seed, {2, i});
    c.sequences.push_back({"lang_a", detail::markov_sequence(a, length, 0, 5, 1)});
    c.sequences.push_back({"lang_b", detail::markov_sequence(b, length, 24, 7, 11)});
    c.sequences.push_back({"code", detail::code_sequence(code, length)});
  }
  return c;
}

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& s : corpus.sequences) {
    out << s.domain << '\t';
    for (std::size_t i = 0; i < s.tokens.size(); ++i) out << (i ? " " : "") << s.tokens[i];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline Corpus read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  Corpus c;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected '<domain>\\t<ids>'");
    Sequence s;
    s.domain = line.substr(0, tab);
    std::istringstream ids(line.substr(tab + 1));
    std::string tok;
    while (ids >> tok) {
      std::size_t used = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || v > 0xffffffffUL)
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": bad token id '" + tok + "'");
      s.tokens.push_back(static_cast<std::uint32_t>(v));
    }
    c.sequences.push_back(std::move(s));
  }
  return c;
}

}  // namespace moeup
