#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "nmtkit/bpe.hpp"
#include "nmtkit/errors.hpp"
#include "nmtkit/utf8.hpp"

namespace nmt {

enum class BrevityMode { shortest, closest };
enum class CaseMode { sensitive, insensitive };

inline constexpr std::size_t kBleuOrder = 4;

/// Sufficient statistics; additive across sentences.
struct BleuStats {
  std::array<std::uint64_t, kBleuOrder> matches{};
  std::array<std::uint64_t, kBleuOrder> totals{};
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
  friend bool operator==(const BleuStats&, const BleuStats&) = default;
};

struct BleuResult {
  double score = 0;  // percentage
  double brevity_penalty = 0;
  double ratio = 0;
  std::uint64_t hyp_len = 0;
  std::uint64_t ref_len = 0;
  std::array<double, kBleuOrder> precisions{};
};

namespace detail {

inline std::map<std::vector<std::string>, std::uint64_t> ngram_counts(const std::vector<std::string>& toks,
                                                                      std::size_t n) {
  std::map<std::vector<std::string>, std::uint64_t> out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[std::vector<std::string>(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

inline std::vector<std::string> bleu_tokens(const std::string& line, CaseMode cm) {
  return split_whitespace(cm == CaseMode::insensitive ? utf8::lowercase(line) : line);
}

}  // namespace detail

/// Statistics of one tokenized hypothesis against its references. Matches
/// are clipped by the maximum count in any single reference.
inline BleuStats sentence_stats(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs,
                                BrevityMode bp) {
  if (refs.empty()) throw ArgumentError("bleu: sentence without references");
  BleuStats s;
  s.hyp_len = hyp.size();
  std::size_t chosen = refs.front().size();
  for (const auto& r : refs) {
    const std::size_t len = r.size();
    if (bp == BrevityMode::shortest) {
      chosen = std::min(chosen, len);
    } else {
      const auto dist = [&](std::size_t l) { return l > hyp.size() ? l - hyp.size() : hyp.size() - l; };
      if (dist(len) < dist(chosen) || (dist(len) == dist(chosen) && len < chosen)) chosen = len;
    }
  }
  s.ref_len = chosen;
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    std::map<std::vector<std::string>, std::uint64_t> max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    for (const auto& [g, c] : detail::ngram_counts(hyp, n)) {
      s.totals[n - 1] += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) s.matches[n - 1] += std::min(c, it->second);
    }
  }
  return s;
}

/// Corpus score; zero when any order has no matches.
inline BleuResult bleu_from_stats(const BleuStats& s) {
  BleuResult r;
  r.hyp_len = s.hyp_len;
  r.ref_len = s.ref_len;
  r.ratio = s.ref_len ? double(s.hyp_len) / double(s.ref_len) : 0.0;
  if (s.hyp_len == 0) return r;
  r.brevity_penalty = s.hyp_len > s.ref_len ? 1.0 : std::exp(1.0 - double(s.ref_len) / double(s.hyp_len));
  double log_sum = 0;
  bool zero = false;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    r.precisions[n] = s.totals[n] ? double(s.matches[n]) / double(s.totals[n]) : 0.0;
    if (s.matches[n] == 0)
      zero = true;
    else
      log_sum += std::log(r.precisions[n]);
  }
  if (!zero) r.score = 100.0 * r.brevity_penalty * std::exp(log_sum / double(kBleuOrder));
  return r;
}

/// refsets[i] holds the references of hypothesis i.
inline std::vector<BleuStats> corpus_stats(const std::vector<std::string>& hyps,
                                           const std::vector<std::vector<std::string>>& refsets, BrevityMode bp,
                                           CaseMode cm) {
  if (hyps.size() != refsets.size())
    throw ArgumentError("bleu: " + std::to_string(hyps.size()) + " hypotheses but " + std::to_string(refsets.size()) +
                        " reference sets");
  if (hyps.empty()) throw ArgumentError("bleu: empty corpus");
  std::vector<BleuStats> out;
  out.reserve(hyps.size());
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    std::vector<std::vector<std::string>> refs;
    for (const auto& r : refsets[i]) refs.push_back(detail::bleu_tokens(r, cm));
    out.push_back(sentence_stats(detail::bleu_tokens(hyps[i], cm), refs, bp));
  }
  return out;
}

inline BleuResult bleu(const std::vector<std::string>& hyps, const std::vector<std::vector<std::string>>& refsets,
                       BrevityMode bp = BrevityMode::shortest, CaseMode cm = CaseMode::insensitive) {
  BleuStats total;
  for (const auto& s : corpus_stats(hyps, refsets, bp, cm)) total += s;
  return bleu_from_stats(total);
}

inline std::string format_bleu(const BleuResult& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "BLEU = %.2f (BP=%.3f, ratio=%.3f, hyp_len=%llu, ref_len=%llu)", r.score,
                r.brevity_penalty, r.ratio, static_cast<unsigned long long>(r.hyp_len),
                static_cast<unsigned long long>(r.ref_len));
  return buf;
}

/// Reference files are line-aligned; transposes them into per-sentence sets.
inline std::vector<std::vector<std::string>> transpose_references(const std::vector<std::vector<std::string>>& files) {
  if (files.empty()) throw ArgumentError("bleu: no reference files");
  std::vector<std::vector<std::string>> out(files.front().size());
  for (const auto& f : files) {
    if (f.size() != out.size())
      throw ArgumentError("bleu: reference files differ in length (" + std::to_string(f.size()) + " vs " +
                          std::to_string(out.size()) + ")");
    for (std::size_t i = 0; i < f.size(); ++i) out[i].push_back(f[i]);
  }
  return out;
}

struct SignificanceResult {
  double p_value = 0;
  std::size_t resamples = 0;
  double difference = 0;  // BLEU(A) - BLEU(B) on the full corpus
};

/// Paired bootstrap: p = fraction of resamples where B scores at least A.
inline SignificanceResult bootstrap_significance(const std::vector<std::string>& hyps_a,
                                                 const std::vector<std::string>& hyps_b,
                                                 const std::vector<std::vector<std::string>>& refsets,
                                                 std::size_t resamples, std::uint64_t seed,
                                                 BrevityMode bp = BrevityMode::shortest,
                                                 CaseMode cm = CaseMode::insensitive) {
  if (resamples < 100) throw ArgumentError("bootstrap: at least 100 resamples required");
  if (hyps_a.size() != hyps_b.size())
    throw ArgumentError("bootstrap: systems have " + std::to_string(hyps_a.size()) + " and " +
                        std::to_string(hyps_b.size()) + " lines");
  const auto sa = corpus_stats(hyps_a, refsets, bp, cm);
  const auto sb = corpus_stats(hyps_b, refsets, bp, cm);
  BleuStats ta, tb;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    ta += sa[i];
    tb += sb[i];
  }
  SignificanceResult r;
  r.resamples = resamples;
  r.difference = bleu_from_stats(ta).score - bleu_from_stats(tb).score;
  std::mt19937_64 rng(seed);
  const std::size_t n = sa.size();
  std::size_t b_wins = 0;
  for (std::size_t k = 0; k < resamples; ++k) {
    BleuStats a, b;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t i = rng() % n;
      a += sa[i];
      b += sb[i];
    }
    if (bleu_from_stats(b).score >= bleu_from_stats(a).score) ++b_wins;
  }
  r.p_value = double(b_wins) / double(resamples);
  return r;
}

}  // namespace nmt
