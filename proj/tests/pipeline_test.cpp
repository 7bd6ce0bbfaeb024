#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <cstring>
#include <map>
#include <sstream>

#include <unistd.h>

#include "nmtkit/checkpoint.hpp"
#include "nmtkit/config.hpp"
#include "nmtkit/corpus.hpp"

using namespace nmt;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("nmtkit_pipeline_" + std::to_string(::getpid()) + "_" +
                                         std::to_string(counter_++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  static inline int counter_ = 0;
};

void write_file(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SavedModel<float> small_model(Architecture arch, bool tie) {
  ModelConfig c;
  c.src_vocab = 6;
  c.tgt_vocab = 5;
  c.embed = 3;
  c.hidden = 4;
  c.arch = arch;
  c.unit = UnitType::lstm;
  c.enc_depth = c.dec_depth = 2;
  c.enc_transitions = 2;
  c.dec_transitions = 3;
  c.tie_embeddings = tie;
  SavedModel<float> m;
  m.params = init_params<float>(c, 9);
  m.src_vocab = Vocab({"<unk>", "<s>", "</s>", "a", "b", "ü"});
  m.tgt_vocab = Vocab({"<unk>", "<s>", "</s>", "x", "y"});
  m.updates = 1234;
  m.dev_loss = 2.5;
  return m;
}

}  // namespace

TEST(Corpus, LoadsAlignedLines) {
  TempDir d;
  write_file(d / "s", "The Cat\nb c\nd\n");
  write_file(d / "t", "x\r\ny Z\nÄ w\n");
  auto c = load_parallel(d / "s", d / "t", true);
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.pairs[0].src, (std::vector<std::string>{"the", "cat"}));
  EXPECT_EQ(c.pairs[0].tgt, (std::vector<std::string>{"x"}));
  EXPECT_EQ(c.pairs[2].tgt, (std::vector<std::string>{"ä", "w"}));
  auto raw = load_parallel(d / "s", d / "t");
  EXPECT_EQ(raw.pairs[0].src, (std::vector<std::string>{"The", "Cat"}));
}

TEST(Corpus, LineCountMismatchNamesBothCounts) {
  TempDir d;
  write_file(d / "s", "a\nb\nc\n");
  write_file(d / "t", "a\nb\nc\nd\n");
  try {
    load_parallel(d / "s", d / "t");
    FAIL();
  } catch (const FormatError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("3 lines"), std::string::npos);
    EXPECT_NE(m.find("4"), std::string::npos);
  }
}

TEST(Corpus, InvalidUtf8ReportsTheLine) {
  TempDir d;
  write_file(d / "s", "ok\nfine\nbad \xc3\x28 here\n");
  try {
    read_lines(d / "s");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_THROW(read_lines(d / "missing"), IoError);
}

TEST(Corpus, LengthFilterBoundaries) {
  ParallelCorpus c;
  const std::vector<std::string> fifty(50, "t"), fiftyone(51, "t");
  c.pairs = {{fifty, fifty}, {fiftyone, fifty}, {fifty, fiftyone}, {{}, {"a"}}, {{"a"}, {"b"}}};
  auto r = filter_by_length(c, 50);
  EXPECT_EQ(r.dropped, 3u);
  ASSERT_EQ(r.corpus.size(), 2u);
  EXPECT_EQ(r.corpus.pairs[0].src.size(), 50u);
  EXPECT_THROW(filter_by_length(c, 0), ArgumentError);
  ParallelCorpus tiny;
  tiny.pairs = {{fiftyone, fiftyone}};
  EXPECT_EQ(filter_by_length(tiny, 50).corpus.size(), 0u);
}

TEST(Corpus, WeightingIsLogicalDuplication) {
  ParallelCorpus a, b;
  a.pairs = {{{"a"}, {"x"}}, {{"b"}, {"y"}}};
  b.pairs = {{{"c"}, {"z"}}};
  auto one = weight_corpora({{a, 1}});
  EXPECT_EQ(one.weights, (std::vector<std::size_t>{1, 1}));
  auto w = weight_corpora({{a, 10}, {b, 1}});
  Vocab sv = Vocab::build(count_tokens(w, true)), tv = Vocab::build(count_tokens(w, false));
  auto ids = to_ids(w, sv, tv);
  EXPECT_EQ(ids.instances(), 21u);
  EXPECT_EQ(count_tokens(w, true).at("a"), 10u);
  EXPECT_THROW(weight_corpora({{a, 0}}), ArgumentError);

  // Epoch statistics equal those of a physically duplicated corpus: the
  // multiset of visited pairs per epoch is the same.
  ParallelCorpus phys;
  for (int k = 0; k < 10; ++k) phys.pairs.insert(phys.pairs.end(), a.pairs.begin(), a.pairs.end());
  phys.pairs.insert(phys.pairs.end(), b.pairs.begin(), b.pairs.end());
  auto pids = to_ids(phys, sv, tv);
  std::map<std::vector<int>, int> wl, pl;
  for (std::uint64_t epoch = 0; epoch < 3; ++epoch) {
    for (const auto& batch : make_batches(ids, 4, 3, epoch))
      for (std::size_t i : batch.indices) ++wl[ids.pairs[i].src];
    for (const auto& batch : make_batches(pids, 4, 3, epoch))
      for (std::size_t i : batch.indices) ++pl[pids.pairs[i].src];
  }
  EXPECT_EQ(wl, pl);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir d;
  for (auto arch : {Architecture::deep_stacked, Architecture::deep_transition})
    for (bool tie : {true, false}) {
      auto m = small_model(arch, tie);
      save_checkpoint(d / "m.ckpt", m);
      auto back = load_checkpoint<float>(d / "m.ckpt");
      EXPECT_EQ(back.params.config, m.params.config);
      EXPECT_EQ(back.src_vocab, m.src_vocab);
      EXPECT_EQ(back.tgt_vocab, m.tgt_vocab);
      EXPECT_EQ(back.updates, 1234u);
      EXPECT_EQ(back.dev_loss, 2.5);
      auto a = m.params.named();
      auto b = back.params.named();
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(a[i].second->shape(), b[i].second->shape());
        EXPECT_EQ(0, std::memcmp(a[i].second->ptr(), b[i].second->ptr(), a[i].second->size() * sizeof(float)));
      }
      EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(m));
    }
}

TEST(Checkpoint, FileLayoutHeader) {
  auto bytes = serialize_checkpoint(small_model(Architecture::deep_stacked, true));
  EXPECT_EQ(bytes.substr(0, 8), "NMTKCKPT");
  EXPECT_EQ(bytes.substr(8, 4), std::string("\x01\x00\x00\x00", 4));
  EXPECT_NE(bytes.find("unit=lstm\narch="), std::string::npos);
}

TEST(Checkpoint, RejectsCorruptTruncatedAndNewerFiles) {
  TempDir d;
  const auto bytes = serialize_checkpoint(small_model(Architecture::deep_transition, false));
  auto expect_error = [&](const std::string& data, const std::string& needle) {
    write_file(d / "bad", data);
    try {
      load_checkpoint<float>(d / "bad");
      ADD_FAILURE() << "accepted: " << needle;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error(bytes.substr(0, bytes.size() / 2), "checksum");
  expect_error(bytes.substr(0, 10), "magic");
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  expect_error(flipped, "checksum");
  auto newer = bytes;
  newer[8] = 2;
  expect_error(newer, "version 2");
  expect_error("garbage", "magic");
  EXPECT_THROW(load_checkpoint<float>(d / "nothing"), IoError);
}

TEST(Checkpoint, DirectoryLockIsExclusive) {
  TempDir d;
  {
    DirectoryLock lock(d / "run");
    EXPECT_THROW(DirectoryLock(d / "run"), IoError);
  }
  EXPECT_NO_THROW(DirectoryLock(d / "run"));
}

TEST(Config, ParsesSectionsAndRejectsUnknownKeys) {
  std::istringstream in(
      "[paths]\ntrain_src = a.src\n[model]\nunit = lstm\narch = deep_transition\nhidden = 32\nlayer_norm = false\n"
      "[train]\nlearning_rate = 0.001\npatience = 3\n[decode]\nbeam = 5\nkbest = 5\n[eval]\nbp_mode = closest\n");
  auto c = parse_config(in);
  EXPECT_EQ(c.paths.train_src, "a.src");
  EXPECT_EQ(c.model.unit, UnitType::lstm);
  EXPECT_EQ(c.model.arch, Architecture::deep_transition);
  EXPECT_EQ(c.model.hidden, 32u);
  EXPECT_FALSE(c.model.layer_norm);
  EXPECT_EQ(c.train.learning_rate, 0.001);
  EXPECT_EQ(c.train.patience, 3u);
  EXPECT_EQ(c.decode.beam, 5u);
  EXPECT_EQ(c.eval.bp, BrevityMode::closest);
  EXPECT_EQ(c.train.batch_size, 40u);

  for (const char* bad : {"[model]\nhiden = 3\n", "[modle]\nhidden = 3\n", "hidden = 3\n", "[model]\nhidden = -3\n",
                          "[model]\nhidden = 3x\n", "[model]\nunit = rnn\n", "[train]\nlowercase = maybe\n"}) {
    std::istringstream is(bad);
    EXPECT_THROW(parse_config(is), FormatError) << bad;
  }
}

TEST(Config, OverridesAndRoundTrip) {
  RunConfig c;
  apply_override(c, "model.embed=7");
  apply_override(c, "eval.case_mode=sensitive");
  apply_override(c, "train.learning_rate=0.0003");
  EXPECT_EQ(c.model.embed, 7u);
  EXPECT_EQ(c.eval.case_mode, CaseMode::sensitive);
  EXPECT_THROW(apply_override(c, "model.embed"), FormatError);
  EXPECT_THROW(apply_override(c, "model.nope=1"), FormatError);
  std::stringstream ss;
  write_config(ss, c);
  auto back = parse_config(ss);
  std::stringstream again;
  write_config(again, back);
  EXPECT_EQ(ss.str(), again.str());
  EXPECT_EQ(back.train.learning_rate, 0.0003);
  EXPECT_EQ(back.model, c.model);
}
