#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "nmtkit/bleu.hpp"
#include "nmtkit/decoding.hpp"
#include "nmtkit/lm.hpp"
#include "nmtkit/utf8.hpp"

namespace nmt {

/// total = nmt * nmt_score + lm * lm_logprob + len * word_count
struct RerankWeights {
  double nmt = 1.0;
  double lm = 0.0;
  double len = 0.0;

  void validate() const {
    for (double v : {nmt, lm, len})
      if (!std::isfinite(v)) throw ArgumentError("rerank weights must be finite");
    if (nmt == 0 && lm == 0 && len == 0) throw ArgumentError("rerank weights are all zero");
  }
  friend bool operator==(const RerankWeights&, const RerankWeights&) = default;
};

struct RerankFeatures {
  double nmt = 0;
  double lm = 0;       // natural log, lowercased detokenized words
  double words = 0;

  double total(const RerankWeights& w) const { return w.nmt * nmt + w.lm * lm + w.len * words; }
};

/// Detokenized text of a k-best hypothesis.
inline std::string hypothesis_text(const KBestEntry& e) { return detokenize(split_whitespace(e.hypothesis)); }

inline RerankFeatures rerank_features(const KBestEntry& e, const LanguageModel& lm) {
  const auto words = split_whitespace(utf8::lowercase(hypothesis_text(e)));
  return {e.nmt_score, lm.sentence_logprob(words), double(words.size())};
}

/// Re-sorts one sentence's list by total score, descending and stable.
/// Each entry gets two columns appended: "lm_logprob word_count" and the
/// total.
inline std::vector<KBestEntry> rerank(const std::vector<KBestEntry>& list, const LanguageModel& lm,
                                      const RerankWeights& w) {
  w.validate();
  if (list.empty()) throw ArgumentError("rerank: empty k-best list");
  struct Scored {
    KBestEntry entry;
    double total;
  };
  std::vector<Scored> scored;
  for (const auto& e : list) {
    const auto f = rerank_features(e, lm);
    Scored s{e, f.total(w)};
    s.entry.extra.push_back(format_score(f.lm) + " " + format_score(f.words));
    s.entry.extra.push_back(format_score(s.total));
    scored.push_back(std::move(s));
  }
  std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) { return a.total > b.total; });
  std::vector<KBestEntry> out;
  for (auto& s : scored) out.push_back(std::move(s.entry));
  return out;
}

/// Search lattice: nmt in {1, 0}, lm in {0 .. 2}, len in {-1 .. 1}; the
/// all-zero point is skipped.
inline std::vector<RerankWeights> default_rerank_grid() {
  std::vector<RerankWeights> grid;
  for (double n : {1.0, 0.0})
    for (double l : {0.0, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0})
      for (double c : {-1.0, -0.5, -0.25, -0.1, 0.0, 0.1, 0.25, 0.5, 1.0})
        if (n != 0 || l != 0 || c != 0) grid.push_back({n, l, c});
  return grid;
}

struct RerankTuneResult {
  RerankWeights weights;
  double bleu = 0;
  double baseline_bleu = 0;  // identity weights
  std::size_t evaluated = 0;
};

/// Grid search maximizing dev BLEU of the reranked 1-best. The identity
/// weights are evaluated first and only replaced on strict improvement.
inline RerankTuneResult tune_rerank_weights(const std::vector<std::vector<KBestEntry>>& lists,
                                            const std::vector<std::vector<std::string>>& refsets,
                                            const LanguageModel& lm,
                                            const std::vector<RerankWeights>& grid = default_rerank_grid(),
                                            BrevityMode bp = BrevityMode::shortest,
                                            CaseMode cm = CaseMode::insensitive) {
  if (lists.size() != refsets.size())
    throw ArgumentError("rerank tuning: " + std::to_string(lists.size()) + " k-best lists but " +
                        std::to_string(refsets.size()) + " reference sets");
  if (lists.empty()) throw ArgumentError("rerank tuning: empty dev set");
  std::vector<std::vector<RerankFeatures>> feats(lists.size());
  std::vector<std::vector<BleuStats>> stats(lists.size());
  std::vector<BleuStats> empty_stats(lists.size());
  for (std::size_t i = 0; i < lists.size(); ++i) {
    std::vector<std::string> hyps;
    for (const auto& e : lists[i]) {
      feats[i].push_back(rerank_features(e, lm));
      hyps.push_back(hypothesis_text(e));
    }
    std::vector<std::vector<std::string>> refs(hyps.size(), refsets[i]);
    if (!hyps.empty()) stats[i] = corpus_stats(hyps, refs, bp, cm);
    empty_stats[i] = corpus_stats({""}, {refsets[i]}, bp, cm).front();
  }
  auto evaluate = [&](const RerankWeights& w) {
    BleuStats total;
    for (std::size_t i = 0; i < lists.size(); ++i) {
      if (feats[i].empty()) {
        total += empty_stats[i];
        continue;
      }
      std::size_t best = 0;
      for (std::size_t k = 1; k < feats[i].size(); ++k)
        if (feats[i][k].total(w) > feats[i][best].total(w)) best = k;
      total += stats[i][best];
    }
    return bleu_from_stats(total).score;
  };

  RerankTuneResult r;
  r.weights = RerankWeights{};
  r.bleu = r.baseline_bleu = evaluate(r.weights);
  r.evaluated = 1;
  for (const auto& w : grid) {
    w.validate();
    const double b = evaluate(w);
    ++r.evaluated;
    if (b > r.bleu) {
      r.bleu = b;
      r.weights = w;
    }
  }
  return r;
}

inline void write_rerank_weights(std::ostream& os, const RerankWeights& w) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "nmt=" << w.nmt << "\nlm=" << w.lm << "\nlen=" << w.len << '\n';
}

inline RerankWeights read_rerank_weights(std::istream& is) {
  RerankWeights w{0, 0, 0};
  bool seen[3] = {};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    const std::string key = line.substr(0, eq);
    int slot = key == "nmt" ? 0 : key == "lm" ? 1 : key == "len" ? 2 : -1;
    if (eq == std::string::npos || slot < 0)
      throw FormatError("weights line " + std::to_string(lineno) + ": expected nmt=, lm= or len=");
    double v = 0;
    try {
      std::size_t used = 0;
      v = std::stod(line.substr(eq + 1), &used);
      if (used != line.size() - eq - 1) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError("weights line " + std::to_string(lineno) + ": bad number");
    }
    (slot == 0 ? w.nmt : slot == 1 ? w.lm : w.len) = v;
    seen[slot] = true;
  }
  if (!seen[0] || !seen[1] || !seen[2]) throw FormatError("weights file must set nmt, lm and len");
  w.validate();
  return w;
}

}  // namespace nmt
