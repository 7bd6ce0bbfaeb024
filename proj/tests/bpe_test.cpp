#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "bpe_oracle.hpp"
#include "nmtkit/bpe.hpp"
#include "nmtkit/utf8.hpp"

using namespace nmt;

TEST(LearnBpe, Examples) {
  EXPECT_EQ(learn_bpe({{"aaab", 1}}, 1), (MergeList{{"a", "a"}}));
  EXPECT_TRUE(learn_bpe({{"aaab", 1}}, 0).empty());
  EXPECT_EQ(learn_bpe({{"ab", 3}, {"cd", 2}}, 2), (MergeList{{"a", "b"}, {"c", "d"}}));
  EXPECT_THROW(learn_bpe({}, 3), ArgumentError);
}

TEST(LearnBpe, TiesGoToTheSmallestPair) {
  EXPECT_EQ(learn_bpe({{"cd", 2}, {"ab", 2}}, 1), (MergeList{{"a", "b"}}));
  EXPECT_EQ(learn_bpe({{"ba", 1}, {"bc", 1}}, 2), (MergeList{{"b", "a"}, {"b", "c"}}));
}

TEST(LearnBpe, StopsWhenNothingIsLeftToMerge) {
  auto m = learn_bpe({{"abc", 1}, {"d", 5}}, 10);
  EXPECT_EQ(m, (MergeList{{"a", "b"}, {"ab", "c"}}));
}

TEST(LearnBpe, NeverCrossesWordBoundaries) {
  // "b a" never appears inside a word even though "ab ab" would suggest it.
  for (const auto& [l, r] : learn_bpe({{"ab", 4}}, 5)) EXPECT_NE(l + r, "ba");
}

TEST(LearnBpe, MatchesBruteForceOracle) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    auto corpus = oracle::random_micro_corpus(rng, trial % 3 == 0);
    const std::size_t n = rng() % 25;
    ASSERT_EQ(learn_bpe(corpus, n), oracle::learn_bpe(corpus, n)) << "trial " << trial;
  }
}

TEST(ApplyBpe, EmptyListSplitsIntoCharacters) {
  auto t = apply_bpe({}, {"héllo", "a"});
  std::vector<SubwordToken> expect = {{"h", true}, {"é", true}, {"l", true}, {"l", true}, {"o", false}, {"a", false}};
  EXPECT_EQ(t, expect);
}

TEST(ApplyBpe, FullyCoveredWordIsOneToken) {
  MergeList m = {{"u", "n"}, {"f", "o"}, {"l", "d"}, {"fo", "ld"}, {"un", "fold"}};
  EXPECT_EQ(apply_bpe(m, {"unfold"}), (std::vector<SubwordToken>{{"unfold", false}}));
  EXPECT_EQ(apply_bpe(m, {"unfolds"}), (std::vector<SubwordToken>{{"unfold", true}, {"s", false}}));
}

TEST(ApplyBpe, EarlierMergesTakePriority) {
  // "abc" with (b,c) ranked before (a,b) must give a + bc.
  EXPECT_EQ(BpeModel({{"b", "c"}, {"a", "b"}}).segment("abc"), (std::vector<std::string>{"a", "bc"}));
  EXPECT_EQ(BpeModel({{"a", "b"}, {"b", "c"}}).segment("abc"), (std::vector<std::string>{"ab", "c"}));
  EXPECT_THROW(BpeModel({{"a", "b"}, {"a", "b"}}), ArgumentError);
}

TEST(ApplyBpe, MatchesOneMergeAtATimeSimulation) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const bool wide = trial % 2 == 0;
    auto corpus = oracle::random_micro_corpus(rng, wide);
    BpeModel model(learn_bpe(corpus, rng() % 30));
    for (int k = 0; k < 20; ++k) {
      const std::string w = oracle::random_word(rng, wide) + oracle::random_word(rng, wide);
      ASSERT_EQ(model.segment(w), oracle::segment(model.merges(), w)) << w;
    }
  }
}

TEST(ApplyBpe, LongerMergePrefixNeverAddsTokens) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto corpus = oracle::random_micro_corpus(rng, trial % 2 == 0);
    auto merges = learn_bpe(corpus, 30);
    std::vector<std::string> words;
    for (const auto& [w, f] : corpus) words.push_back(w);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (std::size_t n = 0; n <= merges.size(); ++n) {
      MergeList prefix(merges.begin(), merges.begin() + n);
      const std::size_t count = apply_bpe(prefix, words).size();
      ASSERT_LE(count, prev);
      prev = count;
      for (const auto& w : words) {
        const auto shorter = BpeModel(MergeList(merges.begin(), merges.begin() + (n ? n - 1 : 0))).segment(w);
        ASSERT_LE(BpeModel(prefix).segment(w).size(), shorter.size()) << w;
      }
    }
  }
}

TEST(UndoBpe, Examples) {
  EXPECT_EQ(undo_bpe({{"x", false}}), (std::vector<std::string>{"x"}));
  EXPECT_EQ(undo_bpe({{"un", true}, {"fold", false}}), (std::vector<std::string>{"unfold"}));
  EXPECT_TRUE(undo_bpe({}).empty());
  EXPECT_THROW(undo_bpe({{"un", true}}), FormatError);
}

TEST(UndoBpe, RoundTripOnRandomWordSequences) {
  std::mt19937_64 rng(99);
  auto merges = learn_bpe(oracle::random_micro_corpus(rng, true), 40);
  BpeModel model(merges);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<std::string> words(rng() % 8);
    for (auto& w : words) w = oracle::random_word(rng, true);
    auto tokens = model.apply(words);
    ASSERT_EQ(undo_bpe(tokens), words);
    ASSERT_EQ(undo_bpe(parse_subwords(join_subwords(tokens))), words);
  }
}

TEST(BpeFormat, SubwordLineRendering) {
  std::vector<SubwordToken> t = {{"un", true}, {"fold", false}, {"x", false}};
  EXPECT_EQ(join_subwords(t), "un@@ fold x");
  EXPECT_EQ(parse_subwords("un@@ fold x"), t);
  EXPECT_EQ(parse_subwords("  @@ a@@  b "), (std::vector<SubwordToken>{{"@@", false}, {"a", true}, {"b", false}}));
}

TEST(BpeFormat, MergeFileRoundTrip) {
  MergeList m = {{"a", "b"}, {"ab", "c"}, {"中", "国"}};
  std::stringstream ss;
  write_merges(ss, m);
  EXPECT_EQ(ss.str(), "#version: 1\na b\nab c\n中 国\n");
  EXPECT_EQ(read_merges(ss), m);
  std::stringstream no_header("x y\r\nz w\n");
  EXPECT_EQ(read_merges(no_header), (MergeList{{"x", "y"}, {"z", "w"}}));
  std::stringstream bad("a b\nc\n");
  EXPECT_THROW(read_merges(bad), FormatError);
}

TEST(Utf8, ValidationAndSplitting) {
  EXPECT_FALSE(utf8::first_invalid("héllo 中文").has_value());
  EXPECT_EQ(utf8::first_invalid("ab\xff"), 2u);
  EXPECT_EQ(utf8::first_invalid("\xc3"), 0u);         // truncated
  EXPECT_EQ(utf8::first_invalid("\xc0\xaf"), 0u);     // overlong
  EXPECT_EQ(utf8::first_invalid("\xed\xa0\x80"), 0u); // surrogate
  EXPECT_EQ(utf8::chars("a中b").size(), 3u);
  EXPECT_THROW(utf8::chars("\x80"), FormatError);
}

TEST(Utf8, Lowercase) {
  EXPECT_EQ(utf8::lowercase("The Cat"), "the cat");
  EXPECT_EQ(utf8::lowercase("ÀÉÎ×Ÿ"), "àéî×ÿ");
  EXPECT_EQ(utf8::lowercase("ĀĹŽ"), "āĺž");
  EXPECT_EQ(utf8::lowercase("ΩΣ ДЁ"), "ωσ дё");
  EXPECT_EQ(utf8::lowercase("中文 123"), "中文 123");
}
