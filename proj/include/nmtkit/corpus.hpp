#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "nmtkit/bpe.hpp"
#include "nmtkit/errors.hpp"
#include "nmtkit/training.hpp"
#include "nmtkit/utf8.hpp"
#include "nmtkit/vocab.hpp"

namespace nmt {

/// Lines of a text file without their terminators. Every line must be
/// valid UTF-8.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (auto bad = utf8::first_invalid(line))
      throw FormatError(path.string() + ": line " + std::to_string(out.size() + 1) + ": invalid UTF-8 at byte " +
                        std::to_string(*bad));
    out.push_back(std::move(line));
  }
  if (in.bad()) throw IoError("error reading " + path.string());
  return out;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out) throw IoError("error writing " + path.string());
}

struct TextPair {
  std::vector<std::string> src, tgt;
};

/// Token pairs with per-pair repetition weights (empty = all 1).
struct ParallelCorpus {
  std::vector<TextPair> pairs;
  std::vector<std::size_t> weights;

  std::size_t size() const { return pairs.size(); }
  std::size_t weight(std::size_t i) const { return weights.empty() ? 1 : weights[i]; }
};

inline ParallelCorpus make_parallel(const std::vector<std::string>& src, const std::vector<std::string>& tgt,
                                    bool lowercase = false) {
  if (src.size() != tgt.size())
    throw FormatError("parallel corpus: source has " + std::to_string(src.size()) + " lines, target has " +
                      std::to_string(tgt.size()));
  ParallelCorpus c;
  for (std::size_t i = 0; i < src.size(); ++i)
    c.pairs.push_back({split_whitespace(lowercase ? utf8::lowercase(src[i]) : src[i]),
                       split_whitespace(lowercase ? utf8::lowercase(tgt[i]) : tgt[i])});
  return c;
}

inline ParallelCorpus load_parallel(const std::filesystem::path& src, const std::filesystem::path& tgt,
                                    bool lowercase = false) {
  const auto s = read_lines(src), t = read_lines(tgt);
  if (s.size() != t.size())
    throw FormatError("line count mismatch: " + src.string() + " has " + std::to_string(s.size()) + " lines, " +
                      tgt.string() + " has " + std::to_string(t.size()));
  return make_parallel(s, t, lowercase);
}

struct FilterResult {
  ParallelCorpus corpus;
  std::size_t dropped = 0;
};

/// Drops pairs with a side longer than max_tokens, and pairs with an empty
/// side.
inline FilterResult filter_by_length(const ParallelCorpus& corpus, std::size_t max_tokens) {
  if (max_tokens == 0) throw ArgumentError("filter_by_length: maximum must be >= 1");
  FilterResult r;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& p = corpus.pairs[i];
    if (p.src.empty() || p.tgt.empty() || p.src.size() > max_tokens || p.tgt.size() > max_tokens) {
      ++r.dropped;
      continue;
    }
    r.corpus.pairs.push_back(p);
    if (!corpus.weights.empty()) r.corpus.weights.push_back(corpus.weights[i]);
  }
  return r;
}

/// Concatenation in which every pair of corpus k is visited multiplier_k
/// times per epoch.
inline ParallelCorpus weight_corpora(const std::vector<std::pair<ParallelCorpus, std::size_t>>& parts) {
  ParallelCorpus out;
  for (const auto& [c, mult] : parts) {
    if (mult == 0) throw ArgumentError("weight_corpora: multipliers must be >= 1");
    for (std::size_t i = 0; i < c.size(); ++i) {
      out.pairs.push_back(c.pairs[i]);
      out.weights.push_back(c.weight(i) * mult);
    }
  }
  return out;
}

inline std::map<std::string, std::uint64_t> count_tokens(const ParallelCorpus& c, bool source) {
  std::map<std::string, std::uint64_t> counts;
  for (std::size_t i = 0; i < c.size(); ++i)
    for (const auto& t : source ? c.pairs[i].src : c.pairs[i].tgt) counts[t] += c.weight(i);
  return counts;
}

inline IdCorpus to_ids(const ParallelCorpus& c, const Vocab& src, const Vocab& tgt) {
  IdCorpus out;
  for (const auto& p : c.pairs) out.pairs.push_back({src.encode(p.src), tgt.encode(p.tgt)});
  out.weights = c.weights;
  return out;
}

}  // namespace nmt
