#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "nmtkit/lm.hpp"

using namespace nmt;
using Sentences = std::vector<std::vector<std::string>>;

namespace {

// Direct recursive evaluation of interpolated modified Kneser-Ney from raw
// counts, without any backoff representation.
class KnOracle {
 public:
  using Gram = std::vector<std::string>;

  KnOracle(const Sentences& corpus, std::size_t order) {
    vocab_.insert("<unk>");
    vocab_.insert("</s>");
    for (const auto& s : corpus) {
      Gram p{"<s>"};
      for (const auto& w : s) {
        p.push_back(w);
        vocab_.insert(w);
      }
      p.push_back("</s>");
      for (std::size_t i = 1; i < p.size(); ++i)
        for (std::size_t n = 1; n <= order && n <= i + 1; ++n) raw_[Gram(p.begin() + (i + 1 - n), p.begin() + (i + 1))]++;
    }
    for (const auto& [g, c] : raw_) order_ = std::max(order_, g.size());
  }

  std::size_t order() const { return order_; }
  const std::set<std::string>& vocab() const { return vocab_; }

  double count(const Gram& g) const {
    if (g.size() == order_ || g.front() == "<s>") {
      auto it = raw_.find(g);
      return it == raw_.end() ? 0 : double(it->second);
    }
    double distinct = 0;
    for (const auto& [h, c] : raw_)
      if (h.size() == g.size() + 1 && Gram(h.begin() + 1, h.end()) == g) ++distinct;
    return distinct;
  }

  std::array<double, 3> discounts(std::size_t n) const {
    std::array<double, 4> coc{};
    for (const auto& [g, c] : raw_) {
      if (g.size() != n || (n == 1 && g.front() == "<s>")) continue;
      const double k = count(g);
      if (k >= 1 && k <= 4) coc[std::size_t(k) - 1] += 1;
    }
    for (double v : coc)
      if (v == 0) return {0.5, 1.0, 1.5};
    const double y = coc[0] / (coc[0] + 2 * coc[1]);
    std::array<double, 3> d = {1 - 2 * y * coc[1] / coc[0], 2 - 3 * y * coc[2] / coc[1], 3 - 4 * y * coc[3] / coc[2]};
    for (int k = 0; k < 3; ++k)
      if (d[k] <= 0 || d[k] >= k + 1) return {0.5, 1.0, 1.5};
    return d;
  }

  double prob(Gram h, std::string w) const {
    if (!vocab_.count(w)) w = "<unk>";
    while (h.size() + 1 > order_) h.erase(h.begin());
    const double lower = h.empty() ? 1.0 / double(vocab_.size()) : prob(Gram(h.begin() + 1, h.end()), w);
    double total = 0, removed = 0;
    const auto d = discounts(h.size() + 1);
    for (const auto& v : vocab_) {
      Gram g = h;
      g.push_back(v);
      const double c = count(g);
      total += c;
      if (c > 0) removed += d[std::min(c, 3.0) - 1];
    }
    if (total == 0) return lower;
    Gram g = h;
    g.push_back(w);
    const double c = count(g);
    return (c > 0 ? (c - d[std::min(c, 3.0) - 1]) / total : 0.0) + removed / total * lower;
  }

 private:
  std::map<Gram, std::uint64_t> raw_;
  std::set<std::string> vocab_;
  std::size_t order_ = 0;
};

Sentences random_corpus(std::uint64_t seed, std::size_t sentences, std::size_t vocab) {
  std::mt19937_64 rng(seed);
  Sentences out;
  for (std::size_t i = 0; i < sentences; ++i) {
    std::vector<std::string> s;
    const std::size_t len = rng() % 7;
    for (std::size_t j = 0; j < len; ++j) s.push_back("w" + std::to_string(rng() % vocab));
    out.push_back(s);
  }
  return out;
}

std::vector<std::string> predictable(const NGramLM& lm) {
  std::vector<std::string> out;
  for (const auto& w : lm.words())
    if (w != "<s>") out.push_back(w);
  return out;
}

}  // namespace

TEST(NGramLM, FourTokenCorpusMatchesHandComputedEstimates) {
  auto lm = train_lm({{"a", "a", "a", "a"}}, 2);
  ASSERT_EQ(lm.order(), 2u);
  EXPECT_NEAR(std::exp(lm.logprob({}, "a")), 0.5, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({}, "</s>")), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({}, "<unk>")), 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({}, "zebra")), 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({"a"}, "a")), 0.625, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({"a"}, "</s>")), 0.125 + 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({"a"}, "<unk>")), 1.0 / 12.0, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({"<s>"}, "a")), 0.5 + 0.5 * 0.5, 1e-12);
  // Counts-of-counts have gaps at both orders, so the fixed discounts apply.
  for (const auto& d : lm.discounts()) EXPECT_EQ(d, (std::array<double, 3>{0.5, 1.0, 1.5}));
}

TEST(NGramLM, MatchesRecursiveOracleOnRandomCorpora) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const auto corpus = random_corpus(seed, 40, 5);
    const std::size_t order = 1 + seed % 4;
    auto lm = train_lm(corpus, order);
    KnOracle oracle(corpus, order);
    ASSERT_EQ(lm.order(), oracle.order());
    std::vector<std::vector<std::string>> contexts = {{}, {"<s>"}, {"w0"}, {"w1", "w2"}, {"<s>", "w3"},
                                                      {"w4", "w4", "w0"}, {"nope"}, {"w2", "nope", "w1"}};
    for (const auto& h : contexts)
      for (const auto& w : std::vector<std::string>{"w0", "w1", "w2", "w3", "w4", "</s>", "<unk>", "other"})
        EXPECT_NEAR(std::exp(lm.logprob(h, w)), oracle.prob(h, w), 1e-12) << seed << " " << w;
  }
}

TEST(NGramLM, SeenContextsAreNormalised) {
  const auto corpus = random_corpus(77, 120, 8);
  for (std::size_t order : {1u, 2u, 3u, 5u}) {
    auto lm = train_lm(corpus, order);
    const auto vocab = predictable(lm);
    for (std::size_t n = 1; n < lm.order(); ++n)
      for (const auto& [g, e] : lm.grams(n)) {
        std::vector<std::string> ctx;
        for (int id : g) ctx.push_back(lm.words()[id]);
        double s = 0;
        for (const auto& w : vocab) s += std::exp(lm.logprob(ctx, w));
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    double s = 0;
    for (const auto& w : vocab) s += std::exp(lm.logprob({}, w));
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(NGramLM, ShortCorpusLowersTheEffectiveOrder) {
  auto lm = train_lm({{"a"}, {}}, 5);
  EXPECT_EQ(lm.order(), 3u);
  EXPECT_THROW(train_lm({}, 3), ArgumentError);
  EXPECT_THROW(train_lm({{"a"}}, 0), ArgumentError);
  EXPECT_THROW(train_lm({{"a", "</s>"}}, 2), ArgumentError);
}

TEST(NGramLM, ArpaRoundTripIsExact) {
  const auto corpus = random_corpus(5, 60, 6);
  auto lm = train_lm(corpus, 3);
  std::stringstream ss;
  lm.write_arpa(ss);
  EXPECT_TRUE(ss.str().starts_with("\\data\\\nngram 1="));
  auto back = NGramLM::read_arpa(ss);
  ASSERT_EQ(back.order(), 3u);
  for (std::size_t n = 1; n <= 3; ++n) EXPECT_EQ(back.grams(n).size(), lm.grams(n).size());
  for (const auto& s : random_corpus(6, 20, 7)) {
    const auto x = back.token_logprobs(s), y = lm.token_logprobs(s);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-13);
  }
}

TEST(NGramLM, ArpaErrors) {
  const std::string good = "\\data\\\nngram 1=3\n\n\\1-grams:\n-0.5\t<unk>\n-0.5\t</s>\n-99\t<s>\n\n\\end\\\n";
  std::stringstream ok(good);
  EXPECT_NO_THROW(NGramLM::read_arpa(ok));
  for (const std::string bad :
       {std::string("ngram 1=3\n"), std::string("\\data\\\nngram 1=4\n\n\\1-grams:\n-0.5\t<unk>\n-0.5\t</s>\n-99\t<s>\n\\end\\\n"),
        std::string("\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5\ta\n-0.5\t</s>\n\\end\\\n"),
        std::string("\\data\\\nngram 1=1\n\n\\1-grams:\nx\t<unk>\n\\end\\\n"),
        std::string("\\data\\\nngram 1=1\n\n\\1-grams:\n-0.5\t<unk>\n")}) {
    std::stringstream ss(bad);
    EXPECT_THROW(NGramLM::read_arpa(ss), FormatError) << bad;
  }
}

TEST(Perplexity, UniformModelGivesVocabularySize) {
  std::stringstream ss("\\data\\\nngram 1=5\n\n\\1-grams:\n");
  std::string arpa = "\\data\\\nngram 1=5\n\n\\1-grams:\n";
  const double l = std::log10(0.25);
  for (const char* w : {"<unk>", "</s>", "x", "y"}) arpa += std::to_string(l) + "\t" + w + "\n";
  arpa += "-99\t<s>\n\n\\end\\\n";
  std::stringstream in(arpa);
  auto lm = NGramLM::read_arpa(in);
  EXPECT_NEAR(perplexity(lm, {{"x", "y", "q"}, {}, {"y"}}), 4.0, 1e-6);
  EXPECT_THROW(perplexity(lm, {}), ArgumentError);
}

TEST(Perplexity, MatchesDirectSummation) {
  const auto corpus = random_corpus(9, 80, 6);
  auto lm = train_lm(corpus, 3);
  const auto test = random_corpus(10, 15, 8);
  double total = 0;
  std::size_t n = 0;
  for (const auto& s : test) {
    std::vector<std::string> hist = {"<s>"};
    auto padded = s;
    padded.push_back("</s>");
    for (const auto& w : padded) {
      total += lm.logprob(hist, w);
      hist.push_back(w);
      ++n;
    }
  }
  EXPECT_NEAR(perplexity(lm, test), std::exp(-total / double(n)), 1e-9);
}

TEST(Perplexity, TrainingCorpusBeatsUniform) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto corpus = random_corpus(seed + 40, 100, 6);
    auto lm = train_lm(corpus, 1 + seed % 3);
    EXPECT_LE(perplexity(lm, corpus), double(predictable(lm).size()));
  }
}

TEST(Perplexity, OrderOneOnUniformCorpus) {
  Sentences corpus;
  for (int r = 0; r < 50; ++r) corpus.push_back({"a", "b", "c", "d", "e", "f", "g", "h", "i"});
  auto lm = train_lm(corpus, 1);
  const double pa = std::exp(lm.logprob({}, "a"));
  for (const char* w : {"b", "e", "i", "</s>"}) EXPECT_NEAR(std::exp(lm.logprob({}, w)), pa, 1e-12);
  // Ten symbols of count 50, fixed discount 1.5, uniform share over 11 types.
  EXPECT_NEAR(pa, 48.5 / 500 + 0.03 / 11, 1e-12);
  EXPECT_NEAR(std::exp(lm.logprob({}, "<unk>")), 0.03 / 11, 1e-12);
  const double ppl = perplexity(lm, corpus);
  EXPECT_GT(ppl, 10.0);
  EXPECT_LT(ppl, 10.1);
}

TEST(Interpolation, SingleComponentGetsAllWeight) {
  auto a = std::make_shared<NGramLM>(train_lm(random_corpus(1, 50, 5), 2));
  auto r = tune_interpolation({a}, random_corpus(2, 10, 5));
  EXPECT_EQ(r.weights, std::vector<double>{1.0});
  EXPECT_NEAR(r.perplexity, perplexity(*a, random_corpus(2, 10, 5)), 1e-9);
}

TEST(Interpolation, IdenticalComponentsKeepThePerplexity) {
  auto a = std::make_shared<NGramLM>(train_lm(random_corpus(1, 50, 5), 3));
  const auto dev = random_corpus(3, 20, 5);
  auto r = tune_interpolation({a, a}, dev);
  EXPECT_NEAR(r.perplexity, perplexity(*a, dev), 1e-9);
  EXPECT_NEAR(r.weights[0] + r.weights[1], 1.0, 1e-12);
}

TEST(Interpolation, PrefersTheMatchingDomain) {
  Sentences ca, cb;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    ca.push_back({"the", i % 2 ? "cat" : "dog", "sat"});
    cb.push_back({"buy", "stock", i % 3 ? "now" : "later"});
  }
  auto a = std::make_shared<NGramLM>(train_lm(ca, 3));
  auto b = std::make_shared<NGramLM>(train_lm(cb, 3));
  Sentences dev(ca.begin(), ca.begin() + 20);
  dev.push_back({"buy", "stock"});
  auto r = tune_interpolation({a, b}, dev);
  EXPECT_GT(r.weights[0], r.weights[1]);
  EXPECT_LE(r.perplexity, std::min(r.component_perplexity[0], r.component_perplexity[1]) + 1e-9);
  InterpolatedLM mix({a, b}, r.weights);
  EXPECT_NEAR(perplexity(mix, dev), r.perplexity, 1e-9);
}

TEST(Interpolation, NeverWorseThanTheBestComponent) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    std::vector<std::shared_ptr<const LanguageModel>> comps;
    for (std::uint64_t k = 0; k < 3; ++k)
      comps.push_back(std::make_shared<NGramLM>(train_lm(random_corpus(seed * 10 + k, 30, 4 + k), 1 + k)));
    auto r = tune_interpolation(comps, random_corpus(seed + 500, 15, 6));
    double sum = 0;
    for (double w : r.weights) {
      EXPECT_GE(w, 0.0);
      sum += w;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_LE(r.perplexity, *std::min_element(r.component_perplexity.begin(), r.component_perplexity.end()) + 1e-9);
    EXPECT_LE(r.iterations, 200u);
  }
}

TEST(Interpolation, MixtureOverSharedVocabularyIsNormalised) {
  const auto corpus = random_corpus(12, 60, 5);
  auto a = std::make_shared<NGramLM>(train_lm(corpus, 2));
  auto b = std::make_shared<NGramLM>(train_lm(corpus, 3));
  InterpolatedLM mix({a, b}, {0.3, 0.7});
  for (const auto& ctx : std::vector<std::vector<std::string>>{{}, {"w1"}, {"w2", "w3"}}) {
    double s = 0;
    for (const auto& w : predictable(*a)) {
      auto padded = ctx;
      padded.push_back(w);
      // probability of w after ctx = exp(difference of prefix scores)
      auto full = mix.token_logprobs(padded);
      s += std::exp(full[padded.size() - 1]);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
  EXPECT_THROW(InterpolatedLM({a, b}, {0.5, 0.6}), ArgumentError);
  EXPECT_THROW(InterpolatedLM({a}, {0.5, 0.5}), ArgumentError);
}

TEST(Interpolation, MixtureFilesLoadComponentsRelativeToTheFile) {
  const auto dir = std::filesystem::temp_directory_path() / "nmtkit_lm_test";
  std::filesystem::create_directories(dir);
  auto a = train_lm(random_corpus(1, 30, 4), 2), b = train_lm(random_corpus(2, 30, 4), 2);
  std::ofstream(dir / "a.arpa") << [&] { std::ostringstream o; a.write_arpa(o); return o.str(); }();
  std::ofstream(dir / "b.arpa") << [&] { std::ostringstream o; b.write_arpa(o); return o.str(); }();
  {
    std::ofstream mix(dir / "mix.txt");
    write_mixture(mix, {0.25, 0.75}, {"a.arpa", "b.arpa"});
  }
  auto lm = load_language_model(dir / "mix.txt");
  auto* interp = dynamic_cast<const InterpolatedLM*>(lm.get());
  ASSERT_NE(interp, nullptr);
  EXPECT_EQ(interp->weights(), (std::vector<double>{0.25, 0.75}));
  auto single = load_language_model(dir / "a.arpa");
  const std::vector<std::string> s = {"w1", "w2"};
  EXPECT_NEAR(single->sentence_logprob(s), a.sentence_logprob(s), 1e-12);
  std::stringstream bad("0.5 a.arpa\n");
  EXPECT_THROW(read_mixture(bad), FormatError);
  EXPECT_THROW(load_language_model(dir / "missing.arpa"), IoError);
  std::filesystem::remove_all(dir);
}
