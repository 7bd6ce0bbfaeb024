#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "nmtkit/bpe.hpp"
#include "nmtkit/errors.hpp"

namespace nmt {

/// Word-level language model scored in natural log.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  /// log p of each word given its history, then of the end symbol.
  virtual std::vector<double> token_logprobs(const std::vector<std::string>& words) const = 0;

  double sentence_logprob(const std::vector<std::string>& words) const {
    double s = 0;
    for (double v : token_logprobs(words)) s += v;
    return s;
  }
};

/// exp of the mean negative log-probability over all scored tokens (each
/// sentence contributes its words plus the end symbol).
inline double perplexity(const LanguageModel& lm, const std::vector<std::vector<std::string>>& sentences) {
  if (sentences.empty()) throw ArgumentError("perplexity: empty corpus");
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : sentences)
    for (double v : lm.token_logprobs(s)) {
      if (!std::isfinite(v)) throw std::logic_error("perplexity: zero-probability event");
      total += v;
      ++n;
    }
  return std::exp(-total / double(n));
}

/// Backoff n-gram model. Probabilities of stored n-grams are already
/// interpolated with their lower orders; an unseen n-gram backs off through
/// the context's backoff weight.
class NGramLM : public LanguageModel {
 public:
  static constexpr const char* kBos = "<s>";
  static constexpr const char* kEos = "</s>";
  static constexpr const char* kUnk = "<unk>";
  // Value written for the begin symbol's unigram, which is never predicted.
  static constexpr double kNeverLog10 = -99.0;

  struct Entry {
    double logprob = 0;
    double backoff = 0;
  };
  using Gram = std::vector<int>;

  NGramLM() {
    intern(kBos);
    intern(kEos);
    intern(kUnk);
  }

  std::size_t order() const { return grams_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  int id(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? unk_id() : it->second;
  }
  static int bos_id() { return 0; }
  static int eos_id() { return 1; }
  static int unk_id() { return 2; }

  const std::map<Gram, Entry>& grams(std::size_t n) const { return grams_.at(n - 1); }

  const Entry* find(const Gram& g) const {
    if (g.empty() || g.size() > grams_.size()) return nullptr;
    const auto& m = grams_[g.size() - 1];
    auto it = m.find(g);
    return it == m.end() ? nullptr : &it->second;
  }

  /// Natural-log probability of `word` after `context` (most recent last).
  double logprob(const std::vector<std::string>& context, const std::string& word) const {
    Gram ctx;
    for (const auto& w : context) ctx.push_back(w == kBos ? bos_id() : id(w));
    return logprob_ids(ctx, id(word));
  }

  double logprob_ids(const Gram& context, int w) const {
    const std::size_t keep = std::min(context.size(), order() - 1);
    Gram ctx(context.end() - static_cast<std::ptrdiff_t>(keep), context.end());
    double bo = 0;
    for (std::size_t k = ctx.size();; --k) {
      Gram g(ctx.end() - static_cast<std::ptrdiff_t>(k), ctx.end());
      g.push_back(w);
      if (const Entry* e = find(g)) return bo + e->logprob;
      if (k == 0) throw std::logic_error("language model has no unigram for '" + words_[w] + "'");
      g.pop_back();
      if (const Entry* e = find(g)) bo += e->backoff;
    }
  }

  std::vector<double> token_logprobs(const std::vector<std::string>& words) const override {
    Gram hist{bos_id()};
    std::vector<double> out;
    out.reserve(words.size() + 1);
    for (const auto& w : words) {
      const int i = id(w);
      out.push_back(logprob_ids(hist, i));
      hist.push_back(i);
    }
    out.push_back(logprob_ids(hist, eos_id()));
    return out;
  }

  /// Discounts (D1, D2, D3+) used for each order when the model was trained.
  const std::vector<std::array<double, 3>>& discounts() const { return discounts_; }

  void write_arpa(std::ostream& os) const {
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << "\\data\\\n";
    for (std::size_t n = 1; n <= order(); ++n) os << "ngram " << n << '=' << grams_[n - 1].size() << '\n';
    for (std::size_t n = 1; n <= order(); ++n) {
      os << "\n\\" << n << "-grams:\n";
      for (const auto& [g, e] : grams_[n - 1]) {
        os << to_log10(e.logprob) << '\t';
        for (std::size_t i = 0; i < g.size(); ++i) os << (i ? " " : "") << words_[g[i]];
        if (n < order() && e.backoff != 0) os << '\t' << e.backoff / std::log(10.0);
        os << '\n';
      }
    }
    os << "\n\\end\\\n";
  }

  static NGramLM read_arpa(std::istream& is) {
    NGramLM lm;
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& msg) {
      throw FormatError("ARPA line " + std::to_string(lineno) + ": " + msg);
    };
    auto next = [&]() -> bool {
      while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") != std::string::npos) return true;
      }
      return false;
    };
    if (!next() || line != "\\data\\") fail("expected \\data\\ header");
    std::vector<std::size_t> counts;
    while (next() && line.starts_with("ngram ")) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("malformed count line");
      std::size_t n = 0, c = 0;
      try {
        n = std::stoul(line.substr(6, eq - 6));
        c = std::stoul(line.substr(eq + 1));
      } catch (const std::exception&) {
        fail("malformed count line");
      }
      if (n != counts.size() + 1) fail("n-gram orders must be listed in sequence");
      counts.push_back(c);
    }
    if (counts.empty()) fail("no n-gram counts");
    lm.grams_.assign(counts.size(), {});
    for (std::size_t n = 1; n <= counts.size(); ++n) {
      if (line != "\\" + std::to_string(n) + "-grams:") fail("expected \\" + std::to_string(n) + "-grams:");
      bool more = false;
      while ((more = next()) && !line.starts_with("\\")) {
        std::istringstream ls(line);
        std::vector<std::string> f;
        std::string tok;
        while (ls >> tok) f.push_back(tok);
        if (f.size() != n + 1 && f.size() != n + 2) fail("expected " + std::to_string(n) + " words");
        Entry e;
        Gram g;
        try {
          e.logprob = from_log10(std::stod(f[0]));
          if (f.size() == n + 2) e.backoff = std::stod(f[n + 1]) * std::log(10.0);
        } catch (const std::exception&) {
          fail("malformed number");
        }
        for (std::size_t i = 1; i <= n; ++i) g.push_back(lm.intern(f[i]));
        if (!lm.grams_[n - 1].emplace(std::move(g), e).second) fail("duplicate n-gram");
      }
      if (lm.grams_[n - 1].size() != counts[n - 1])
        fail("order " + std::to_string(n) + " lists " + std::to_string(lm.grams_[n - 1].size()) +
             " n-grams, header says " + std::to_string(counts[n - 1]));
      if (!more) fail("unexpected end of file");
    }
    if (line != "\\end\\") fail("expected \\end\\");
    if (!lm.find({unk_id()})) throw FormatError("ARPA model has no <unk> unigram");
    return lm;
  }

  friend NGramLM train_lm(const std::vector<std::vector<std::string>>& sentences, std::size_t order);

 private:
  static double to_log10(double ln) { return std::isinf(ln) ? kNeverLog10 : ln / std::log(10.0); }
  static double from_log10(double l10) {
    return l10 <= kNeverLog10 ? -std::numeric_limits<double>::infinity() : l10 * std::log(10.0);
  }

  int intern(const std::string& w) {
    auto [it, added] = ids_.emplace(w, static_cast<int>(words_.size()));
    if (added) words_.push_back(w);
    return it->second;
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::vector<std::map<Gram, Entry>> grams_;
  std::vector<std::array<double, 3>> discounts_;
};

namespace detail {

inline constexpr std::array<double, 3> kFallbackDiscounts = {0.5, 1.0, 1.5};

// Modified Kneser-Ney discounts from counts-of-counts n1..n4; the fixed
// fallback is used when a count-of-count is zero or an estimate leaves (0, k).
inline std::array<double, 3> kn_discounts(const std::array<std::uint64_t, 4>& n) {
  for (auto c : n)
    if (c == 0) return kFallbackDiscounts;
  const double y = double(n[0]) / (double(n[0]) + 2.0 * double(n[1]));
  std::array<double, 3> d = {1.0 - 2.0 * y * double(n[1]) / double(n[0]),
                             2.0 - 3.0 * y * double(n[2]) / double(n[1]),
                             3.0 - 4.0 * y * double(n[3]) / double(n[2])};
  for (std::size_t k = 0; k < 3; ++k)
    if (!(d[k] > 0 && d[k] < double(k + 1))) return kFallbackDiscounts;
  return d;
}

}  // namespace detail

/// Interpolated modified Kneser-Ney. Sentences are padded with <s> and
/// </s>; lower orders use continuation counts except for n-grams starting
/// with <s>. The unigram level interpolates with a uniform distribution over
/// the vocabulary (including <unk>, excluding <s>). When no sentence is long
/// enough for `order`, the model uses the highest order observed.
inline NGramLM train_lm(const std::vector<std::vector<std::string>>& sentences, std::size_t order) {
  if (order == 0) throw ArgumentError("train_lm: order must be >= 1");
  if (sentences.empty()) throw ArgumentError("train_lm: empty corpus");
  using Gram = NGramLM::Gram;
  NGramLM lm;
  const int bos = NGramLM::bos_id();

  std::vector<std::map<Gram, std::uint64_t>> raw(order);
  for (const auto& s : sentences) {
    Gram p{bos};
    for (const auto& w : s) {
      if (w == NGramLM::kBos || w == NGramLM::kEos) throw ArgumentError("train_lm: corpus contains '" + w + "'");
      p.push_back(lm.intern(w));
    }
    p.push_back(NGramLM::eos_id());
    for (std::size_t i = 1; i < p.size(); ++i)
      for (std::size_t n = 1; n <= std::min(order, i + 1); ++n) ++raw[n - 1][Gram(p.begin() + (i + 1 - n), p.begin() + (i + 1))];
  }
  while (order > 1 && raw[order - 1].empty()) --order;
  raw.resize(order);

  // Adjusted counts.
  std::vector<std::map<Gram, std::uint64_t>> adj(order);
  adj[order - 1] = raw[order - 1];
  for (std::size_t n = order - 1; n >= 1; --n) {
    for (const auto& [g, c] : raw[n]) ++adj[n - 1][Gram(g.begin() + 1, g.end())];
    for (const auto& [g, c] : raw[n - 1])
      if (g.front() == bos) adj[n - 1][g] = c;
  }

  const double vocab = double(lm.words_.size() - 1);  // without <s>
  lm.grams_.assign(order, {});
  lm.discounts_.assign(order, {});
  for (std::size_t n = 1; n <= order; ++n) {
    std::array<std::uint64_t, 4> coc{};
    for (const auto& [g, c] : adj[n - 1])
      if (c <= 4) ++coc[c - 1];
    const auto d = detail::kn_discounts(coc);
    lm.discounts_[n - 1] = d;
    auto disc = [&](std::uint64_t c) { return d[std::min<std::uint64_t>(c, 3) - 1]; };

    struct Ctx {
      double total = 0, removed = 0;
    };
    std::map<Gram, Ctx> ctx;
    for (const auto& [g, c] : adj[n - 1]) {
      auto& x = ctx[Gram(g.begin(), g.end() - 1)];
      x.total += double(c);
      x.removed += disc(c);
    }
    auto& level = lm.grams_[n - 1];
    for (const auto& [g, c] : adj[n - 1]) {
      const Ctx& x = ctx.at(Gram(g.begin(), g.end() - 1));
      const double gamma = x.removed / x.total;
      double lower = 1.0 / vocab;
      if (n > 1) lower = std::exp(lm.grams_[n - 2].at(Gram(g.begin() + 1, g.end())).logprob);
      level[g].logprob = std::log((double(c) - disc(c)) / x.total + gamma * lower);
    }
    if (n == 1) {
      const double gamma = ctx.at({}).removed / ctx.at({}).total;
      for (int w = 1; w < static_cast<int>(lm.words_.size()); ++w)
        if (!level.count({w})) level[{w}].logprob = std::log(gamma / vocab);
      level[{bos}].logprob = -std::numeric_limits<double>::infinity();
    } else {
      for (const auto& [h, x] : ctx) lm.grams_[n - 2].at(h).backoff = std::log(x.removed / x.total);
    }
  }
  return lm;
}

/// Fixed-weight mixture of component models.
class InterpolatedLM : public LanguageModel {
 public:
  InterpolatedLM(std::vector<std::shared_ptr<const LanguageModel>> components, std::vector<double> weights)
      : components_(std::move(components)), weights_(std::move(weights)) {
    if (components_.empty()) throw ArgumentError("interpolated LM needs at least one component");
    if (weights_.size() != components_.size()) throw ArgumentError("one mixture weight per component required");
    double sum = 0;
    for (double w : weights_) {
      if (!(w >= 0) || !std::isfinite(w)) throw ArgumentError("mixture weights must be finite and >= 0");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ArgumentError("mixture weights must sum to 1");
  }

  const std::vector<double>& weights() const { return weights_; }
  const std::vector<std::shared_ptr<const LanguageModel>>& components() const { return components_; }

  std::vector<double> token_logprobs(const std::vector<std::string>& words) const override {
    std::vector<std::vector<double>> parts;
    for (const auto& c : components_) parts.push_back(c->token_logprobs(words));
    std::vector<double> out(parts.front().size());
    for (std::size_t t = 0; t < out.size(); ++t) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (weights_[i] > 0) m = std::max(m, parts[i][t]);
      double s = 0;
      for (std::size_t i = 0; i < parts.size(); ++i)
        if (weights_[i] > 0) s += weights_[i] * std::exp(parts[i][t] - m);
      out[t] = m + std::log(s);
    }
    return out;
  }

 private:
  std::vector<std::shared_ptr<const LanguageModel>> components_;
  std::vector<double> weights_;
};

struct InterpolationResult {
  std::vector<double> weights;
  double perplexity = 0;
  std::vector<double> component_perplexity;
  std::size_t iterations = 0;
};

/// Mixture weights maximizing dev likelihood by EM, starting from uniform
/// weights. Stops when no weight moves by 1e-6 or after max_iterations. The
/// result is never worse than the best single component.
inline InterpolationResult tune_interpolation(const std::vector<std::shared_ptr<const LanguageModel>>& components,
                                              const std::vector<std::vector<std::string>>& dev,
                                              std::size_t max_iterations = 200, double tolerance = 1e-6) {
  if (components.empty()) throw ArgumentError("tune_interpolation: no components");
  if (dev.empty()) throw ArgumentError("tune_interpolation: empty dev corpus");
  const std::size_t K = components.size();
  std::vector<std::vector<double>> lp(K);  // [component][token]
  for (std::size_t i = 0; i < K; ++i)
    for (const auto& s : dev)
      for (double v : components[i]->token_logprobs(s)) lp[i].push_back(v);
  const std::size_t T = lp[0].size();

  // Per-token probabilities relative to the per-token maximum.
  std::vector<double> shift(T, -std::numeric_limits<double>::infinity());
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < K; ++i) shift[t] = std::max(shift[t], lp[i][t]);
  for (std::size_t t = 0; t < T; ++t)
    if (!std::isfinite(shift[t])) throw std::logic_error("tune_interpolation: dev token with zero probability");
  std::vector<std::vector<double>> p(K, std::vector<double>(T));
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t t = 0; t < T; ++t) p[i][t] = std::exp(lp[i][t] - shift[t]);

  auto loglik = [&](const std::vector<double>& w) {
    double s = 0;
    for (std::size_t t = 0; t < T; ++t) {
      double m = 0;
      for (std::size_t i = 0; i < K; ++i) m += w[i] * p[i][t];
      s += std::log(m) + shift[t];
    }
    return s;
  };

  InterpolationResult r;
  std::vector<double> w(K, 1.0 / double(K));
  double ll = loglik(w);
  while (r.iterations < max_iterations) {
    std::vector<double> next(K, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      double m = 0;
      for (std::size_t i = 0; i < K; ++i) m += w[i] * p[i][t];
      for (std::size_t i = 0; i < K; ++i) next[i] += w[i] * p[i][t] / m;
    }
    for (auto& v : next) v /= double(T);
    const double sum = std::accumulate(next.begin(), next.end(), 0.0);
    for (auto& v : next) v /= sum;
    double change = 0;
    for (std::size_t i = 0; i < K; ++i) change = std::max(change, std::abs(next[i] - w[i]));
    const double next_ll = loglik(next);
    if (next_ll < ll - 1e-10 * (1.0 + std::abs(ll)))
      throw std::logic_error("tune_interpolation: EM decreased the dev likelihood");
    w = std::move(next);
    ll = next_ll;
    ++r.iterations;
    if (change < tolerance) break;
  }

  for (std::size_t i = 0; i < K; ++i) {
    std::vector<double> corner(K, 0.0);
    corner[i] = 1.0;
    const double c = loglik(corner);
    r.component_perplexity.push_back(std::exp(-c / double(T)));
    if (c > ll) {
      ll = c;
      w = corner;
    }
  }
  r.weights = std::move(w);
  r.perplexity = std::exp(-ll / double(T));
  return r;
}

/// Mixture file: one "weight<TAB>path" line per component.
inline void write_mixture(std::ostream& os, const std::vector<double>& weights, const std::vector<std::string>& paths) {
  if (weights.size() != paths.size()) throw ArgumentError("write_mixture: one path per weight required");
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < weights.size(); ++i) os << weights[i] << '\t' << paths[i] << '\n';
}

inline std::vector<std::pair<double, std::string>> read_mixture(std::istream& is) {
  std::vector<std::pair<double, std::string>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab + 1 == line.size())
      throw FormatError("mixture file line " + std::to_string(lineno) + ": expected 'weight<TAB>path'");
    try {
      std::size_t used = 0;
      const double w = std::stod(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("trailing");
      out.emplace_back(w, line.substr(tab + 1));
    } catch (const std::exception&) {
      throw FormatError("mixture file line " + std::to_string(lineno) + ": bad weight");
    }
  }
  if (out.empty()) throw FormatError("mixture file lists no components");
  return out;
}

inline NGramLM load_arpa(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open language model " + path.string());
  try {
    return NGramLM::read_arpa(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Loads an ARPA file or a mixture file; mixture component paths are
/// relative to the mixture file's directory.
inline std::shared_ptr<const LanguageModel> load_language_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open language model " + path.string());
  std::string first;
  while (std::getline(in, first) && first.find_first_not_of(" \t\r") == std::string::npos) {
  }
  if (first.starts_with("\\data\\")) return std::make_shared<NGramLM>(load_arpa(path));
  in.clear();
  in.seekg(0);
  std::vector<std::shared_ptr<const LanguageModel>> comps;
  std::vector<double> weights;
  for (const auto& [w, p] : read_mixture(in)) {
    std::filesystem::path cp(p);
    if (cp.is_relative()) cp = path.parent_path() / cp;
    comps.push_back(std::make_shared<NGramLM>(load_arpa(cp)));
    weights.push_back(w);
  }
  return std::make_shared<InterpolatedLM>(std::move(comps), std::move(weights));
}

}  // namespace nmt
