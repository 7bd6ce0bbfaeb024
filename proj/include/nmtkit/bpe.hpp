#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nmtkit/errors.hpp"
#include "nmtkit/utf8.hpp"

namespace nmt {

using Merge = std::pair<std::string, std::string>;
using MergeList = std::vector<Merge>;

/// One subword; `continues` is set when the word goes on after it.
struct SubwordToken {
  std::string text;
  bool continues = false;

  friend bool operator==(const SubwordToken&, const SubwordToken&) = default;
};

inline constexpr std::string_view kContinuation = "@@";

namespace detail {

// Replaces every left-to-right non-overlapping occurrence of (a, b).
inline bool merge_in_place(std::vector<std::string>& syms, const std::string& a, const std::string& b) {
  bool changed = false;
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
      out.push_back(a + b);
      ++i;
      changed = true;
    } else {
      out.push_back(std::move(syms[i]));
    }
  }
  syms = std::move(out);
  return changed;
}

}  // namespace detail

/// Learns up to n_merges merges from word frequencies. Each round merges
/// the adjacent symbol pair with the highest frequency (overlapping
/// occurrences counted), ties going to the smallest (left, right) pair.
/// Pairs never cross word boundaries.
inline MergeList learn_bpe(const std::map<std::string, std::uint64_t>& word_freqs, std::size_t n_merges) {
  if (word_freqs.empty()) throw ArgumentError("learn_bpe: empty vocabulary");
  struct Word {
    std::vector<std::string> syms;
    std::uint64_t freq;
  };
  std::vector<Word> words;
  for (const auto& [w, f] : word_freqs) {
    if (w.empty()) throw ArgumentError("learn_bpe: empty word");
    if (f > 0) words.push_back({utf8::chars(w), f});
  }

  std::map<Merge, std::int64_t> counts;
  std::map<Merge, std::set<std::size_t>> where;
  // best pair = first element: highest count, then smallest pair
  std::set<std::pair<std::int64_t, Merge>> ranked;

  auto adjust = [&](const Merge& p, std::int64_t delta) {
    auto& c = counts[p];
    if (c > 0) ranked.erase({-c, p});
    c += delta;
    if (c > 0) ranked.insert({-c, p});
  };
  auto add_word = [&](std::size_t wi, int sign) {
    const auto& w = words[wi];
    for (std::size_t i = 0; i + 1 < w.syms.size(); ++i) {
      Merge p{w.syms[i], w.syms[i + 1]};
      adjust(p, sign * static_cast<std::int64_t>(w.freq));
      if (sign > 0) where[p].insert(wi);
    }
  };
  for (std::size_t wi = 0; wi < words.size(); ++wi) add_word(wi, +1);

  MergeList merges;
  while (merges.size() < n_merges && !ranked.empty()) {
    const Merge best = ranked.begin()->second;
    merges.push_back(best);
    const std::set<std::size_t> affected = where[best];
    for (std::size_t wi : affected) {
      add_word(wi, -1);
      detail::merge_in_place(words[wi].syms, best.first, best.second);
      add_word(wi, +1);
    }
    where.erase(best);
  }
  return merges;
}

/// Applies a merge list: symbols start as code points and the adjacent pair
/// with the lowest merge rank is merged until no listed pair remains.
class BpeModel {
 public:
  BpeModel() = default;
  explicit BpeModel(MergeList merges) : merges_(std::move(merges)) {
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      if (!rank_.emplace(merges_[i], i).second) throw ArgumentError("duplicate merge in list");
    }
  }

  const MergeList& merges() const { return merges_; }

  std::vector<std::string> segment(const std::string& word) const {
    std::vector<std::string> syms = utf8::chars(word);
    while (syms.size() > 1) {
      std::size_t best = merges_.size();
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank_.find({syms[i], syms[i + 1]});
        if (it != rank_.end() && it->second < best) best = it->second;
      }
      if (best == merges_.size()) break;
      detail::merge_in_place(syms, merges_[best].first, merges_[best].second);
    }
    return syms;
  }

  std::vector<SubwordToken> apply(const std::vector<std::string>& words) const {
    std::vector<SubwordToken> out;
    for (const auto& w : words) {
      auto pieces = segment(w);
      for (std::size_t i = 0; i < pieces.size(); ++i) out.push_back({std::move(pieces[i]), i + 1 < pieces.size()});
    }
    return out;
  }

 private:
  MergeList merges_;
  std::map<Merge, std::size_t> rank_;
};

inline std::vector<SubwordToken> apply_bpe(const MergeList& merges, const std::vector<std::string>& words) {
  return BpeModel(merges).apply(words);
}

/// Joins continuation runs back into words.
inline std::vector<std::string> undo_bpe(const std::vector<SubwordToken>& tokens) {
  std::vector<std::string> words;
  std::string cur;
  for (const auto& t : tokens) {
    cur += t.text;
    if (!t.continues) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!tokens.empty() && tokens.back().continues)
    throw FormatError("undo_bpe: sequence ends with a continuation token '" + tokens.back().text + "'");
  return words;
}

/// "un@@ fold" style rendering.
inline std::string join_subwords(const std::vector<SubwordToken>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i].text;
    if (tokens[i].continues) out += kContinuation;
  }
  return out;
}

inline std::vector<std::string> split_whitespace(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline std::vector<SubwordToken> parse_subwords(const std::string& line) {
  std::vector<SubwordToken> out;
  for (auto& w : split_whitespace(line)) {
    SubwordToken t{w, false};
    if (w.size() > kContinuation.size() && w.ends_with(kContinuation)) {
      t.text = w.substr(0, w.size() - kContinuation.size());
      t.continues = true;
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline void write_merges(std::ostream& os, const MergeList& merges) {
  os << "#version: 1\n";
  for (const auto& [a, b] : merges) os << a << ' ' << b << '\n';
}

inline MergeList read_merges(std::istream& is) {
  MergeList out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.starts_with("#version")) continue;
    auto parts = split_whitespace(line);
    if (parts.size() != 2) throw FormatError("merge file line " + std::to_string(lineno) + ": expected 'left right'");
    out.emplace_back(parts[0], parts[1]);
  }
  return out;
}

}  // namespace nmt
