#pragma once

// Brute-force BPE: recount every pair from scratch each round, and apply a
// merge list one merge at a time in list order.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nmtkit/bpe.hpp"

namespace nmt::oracle {

inline std::vector<std::string> split_chars(const std::string& w) { return utf8::chars(w); }

inline void merge_all(std::vector<std::string>& s, const Merge& m) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i + 1 < s.size() && s[i] == m.first && s[i + 1] == m.second) {
      out.push_back(m.first + m.second);
      ++i;
    } else {
      out.push_back(s[i]);
    }
  }
  s = out;
}

inline MergeList learn_bpe(const std::map<std::string, std::uint64_t>& freqs, std::size_t n) {
  std::vector<std::pair<std::vector<std::string>, std::uint64_t>> words;
  for (const auto& [w, f] : freqs) words.push_back({split_chars(w), f});
  MergeList out;
  while (out.size() < n) {
    std::map<Merge, std::uint64_t> counts;
    for (const auto& [s, f] : words)
      for (std::size_t i = 0; i + 1 < s.size(); ++i) counts[{s[i], s[i + 1]}] += f;
    if (counts.empty()) break;
    // std::map iterates pairs in ascending order, so the first maximum wins ties.
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    out.push_back(best->first);
    for (auto& [s, f] : words) merge_all(s, best->first);
  }
  return out;
}

inline std::vector<std::string> segment(const MergeList& merges, const std::string& word) {
  auto s = split_chars(word);
  for (const auto& m : merges) merge_all(s, m);
  return s;
}

/// Random word over a small alphabet (so that ties and repeats are common),
/// optionally including multi-byte characters.
inline std::string random_word(std::mt19937_64& rng, bool multibyte) {
  static const std::vector<std::string> ascii = {"a", "b", "c"};
  static const std::vector<std::string> wide = {"a", "b", "é", "中", "ß"};
  const auto& alphabet = multibyte ? wide : ascii;
  const std::size_t len = 1 + rng() % 6;
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w += alphabet[rng() % alphabet.size()];
  return w;
}

inline std::map<std::string, std::uint64_t> random_micro_corpus(std::mt19937_64& rng, bool multibyte = false) {
  std::map<std::string, std::uint64_t> freqs;
  const std::size_t n = 1 + rng() % 30;
  for (std::size_t i = 0; i < n; ++i) freqs[random_word(rng, multibyte)] += 1 + rng() % 3;
  return freqs;
}

}  // namespace nmt::oracle
