#pragma once

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "nmtkit/bleu.hpp"
#include "nmtkit/bpe.hpp"
#include "nmtkit/checkpoint.hpp"
#include "nmtkit/config.hpp"
#include "nmtkit/corpus.hpp"
#include "nmtkit/decoding.hpp"
#include "nmtkit/lm.hpp"
#include "nmtkit/rerank.hpp"
#include "nmtkit/training.hpp"

namespace nmt {

namespace cli_detail {

namespace fs = std::filesystem;

struct Io {
  std::istream& in;
  std::ostream& out;
  std::ostream& err;
};

inline std::vector<std::string> read_stream_lines(std::istream& is, const std::string& name) {
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (auto bad = utf8::first_invalid(line))
      throw FormatError(name + ": line " + std::to_string(out.size() + 1) + ": invalid UTF-8 at byte " +
                        std::to_string(*bad));
    out.push_back(std::move(line));
  }
  return out;
}

// "-" or empty reads standard input.
inline std::vector<std::string> input_lines(const std::string& path, Io& io) {
  if (path.empty() || path == "-") return read_stream_lines(io.in, "<stdin>");
  return read_lines(path);
}

class Output {
 public:
  Output(const std::string& path, Io& io) {
    if (path.empty() || path == "-") {
      os_ = &io.out;
    } else {
      file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
      if (!*file_) throw IoError("cannot write " + path);
      os_ = file_.get();
    }
    path_ = path;
  }
  std::ostream& operator*() { return *os_; }
  void close() {
    os_->flush();
    if (!*os_) throw IoError("error writing " + (path_.empty() ? std::string("<stdout>") : path_));
  }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* os_ = nullptr;
  std::string path_;
};

inline void require_path(const std::string& value, const std::string& key) {
  if (value.empty()) throw ArgumentError("missing required path " + key + " (set it in the config or with --set)");
  if (!fs::exists(value)) throw IoError(key + ": no such file " + value);
}

inline std::string maybe_lower(const std::string& s, bool lower) { return lower ? utf8::lowercase(s) : s; }

inline MergeList load_merges(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open merges " + path);
  try {
    return read_merges(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline std::vector<std::vector<std::string>> references(const std::vector<std::string>& files, std::size_t expected) {
  std::vector<std::vector<std::string>> lines;
  for (const auto& f : files) lines.push_back(read_lines(f));
  auto sets = transpose_references(lines);
  if (sets.size() != expected)
    throw ArgumentError("references have " + std::to_string(sets.size()) + " lines, hypotheses have " +
                        std::to_string(expected));
  return sets;
}

inline std::vector<std::vector<std::string>> lm_sentences(const std::vector<std::string>& lines) {
  std::vector<std::vector<std::string>> out;
  for (const auto& l : lines) out.push_back(split_whitespace(utf8::lowercase(l)));
  return out;
}

inline std::vector<std::vector<KBestEntry>> load_kbest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open k-best file " + path);
  try {
    return read_kbest(in);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

// ---- subcommands ----

inline void cmd_bpe_learn(const RunConfig& rc, const std::vector<std::string>& inputs, const std::string& output,
                          Io& io) {
  std::map<std::string, std::uint64_t> freqs;
  for (const auto& f : inputs)
    for (const auto& line : read_lines(f))
      for (const auto& w : split_whitespace(maybe_lower(line, rc.lowercase))) ++freqs[w];
  if (freqs.empty()) throw ArgumentError("bpe-learn: input has no words");
  const MergeList merges = learn_bpe(freqs, rc.bpe_operations);
  Output out(output, io);
  write_merges(*out, merges);
  out.close();
  io.err << "learned " << merges.size() << " merges from " << freqs.size() << " word types\n";
}

inline void cmd_bpe_apply(const RunConfig& rc, const std::string& merges_path, const std::string& input,
                          const std::string& output, Io& io) {
  const BpeModel bpe(load_merges(merges_path));
  const auto lines = input_lines(input, io);
  Output out(output, io);
  for (const auto& l : lines) *out << join_subwords(bpe.apply(split_whitespace(maybe_lower(l, rc.lowercase)))) << '\n';
  out.close();
}

struct ExtraCorpus {
  std::string src, tgt;
  std::size_t multiplier = 1;
};

inline void cmd_train(const RunConfig& rc, const std::vector<ExtraCorpus>& extra, Io& io) {
  require_path(rc.paths.train_src, "paths.train_src");
  require_path(rc.paths.train_tgt, "paths.train_tgt");
  require_path(rc.paths.dev_src, "paths.dev_src");
  require_path(rc.paths.dev_tgt, "paths.dev_tgt");
  if (rc.paths.checkpoint_dir.empty()) throw ArgumentError("missing required path paths.checkpoint_dir");
  for (const auto& e : extra) {
    require_path(e.src, "--add-corpus source");
    require_path(e.tgt, "--add-corpus target");
  }
  rc.train.validate();
  const fs::path dir(rc.paths.checkpoint_dir);
  DirectoryLock lock(dir);

  std::vector<std::pair<ParallelCorpus, std::size_t>> parts;
  parts.emplace_back(load_parallel(rc.paths.train_src, rc.paths.train_tgt, rc.lowercase), 1);
  for (const auto& e : extra) parts.emplace_back(load_parallel(e.src, e.tgt, rc.lowercase), e.multiplier);
  auto filtered = filter_by_length(weight_corpora(parts), rc.train.max_length);
  io.err << "training pairs: " << filtered.corpus.size() << " (dropped " << filtered.dropped << ")\n";
  if (filtered.corpus.size() == 0) throw ArgumentError("train: no training pairs left after length filtering");
  auto dev = filter_by_length(load_parallel(rc.paths.dev_src, rc.paths.dev_tgt, rc.lowercase), rc.train.max_length);
  if (dev.corpus.size() == 0) throw ArgumentError("train: no dev pairs left after length filtering");

  const Vocab src_vocab = Vocab::build(count_tokens(filtered.corpus, true), rc.src_vocab_size);
  const Vocab tgt_vocab = Vocab::build(count_tokens(filtered.corpus, false), rc.tgt_vocab_size);
  ModelConfig mc = rc.model;
  mc.src_vocab = src_vocab.size();
  mc.tgt_vocab = tgt_vocab.size();
  io.err << "vocabulary: source " << mc.src_vocab << ", target " << mc.tgt_vocab << '\n';

  {
    std::ofstream cfg(dir / "config.ini");
    RunConfig effective = rc;
    effective.model = mc;
    write_config(cfg, effective);
  }
  ModelParams<float> params = init_params<float>(mc, rc.train.seed);
  TrainHooks<float> hooks;
  hooks.log = &io.err;
  hooks.on_checkpoint = [&](const Checkpoint<float>& cp, bool best) {
    SavedModel<float> m{cp.params, src_vocab, tgt_vocab, cp.updates, cp.dev_loss};
    save_checkpoint(dir / "last.ckpt", m);
    if (best) save_checkpoint(dir / "best.ckpt", m);
  };
  const auto result = train(params, to_ids(filtered.corpus, src_vocab, tgt_vocab),
                            to_ids(dev.corpus, src_vocab, tgt_vocab), rc.train, hooks);
  if (result.dev_losses.empty()) throw ArgumentError("train: finished before the first checkpoint");
  io.err << (result.early_stopped ? "early stop" : "stopped") << " after " << result.updates
         << " updates; best dev_loss " << result.best.dev_loss << " at update " << result.best.updates << '\n';
}

inline void cmd_translate(const RunConfig& rc, const std::vector<std::string>& checkpoints, const std::string& input,
                          const std::string& output, const std::string& kbest_path, Io& io) {
  if (checkpoints.empty()) throw ArgumentError("translate: at least one --checkpoint is required");
  std::vector<SavedModel<float>> models;
  for (const auto& c : checkpoints) models.push_back(load_checkpoint<float>(c));
  for (const auto& m : models)
    if (!(m.src_vocab == models.front().src_vocab) || !(m.tgt_vocab == models.front().tgt_vocab))
      throw ArgumentError("translate: ensemble members were trained with different vocabularies");
  std::vector<const ModelParams<float>*> members;
  for (const auto& m : models) members.push_back(&m.params);
  const Ensemble<float> ensemble(members);

  std::unique_ptr<BpeModel> bpe;
  if (!rc.paths.src_merges.empty()) bpe = std::make_unique<BpeModel>(load_merges(rc.paths.src_merges));

  TranslateOptions opt;
  opt.threads = rc.decode.threads;
  opt.beam.max_len_factor = rc.decode.max_len_factor;
  opt.beam.beam_size = rc.decode.beam;
  opt.beam.k = 1;
  if (!kbest_path.empty()) {
    // the k-best list cannot be longer than the beam
    opt.beam.k = rc.decode.kbest;
    opt.beam.beam_size = std::max(rc.decode.beam, rc.decode.kbest);
  }
  std::vector<std::string> lines = input_lines(input, io);
  for (auto& l : lines) l = maybe_lower(l, rc.lowercase);
  io.err << "translating " << lines.size() << " lines with " << members.size() << " model(s)\n";
  const auto result = translate_lines(ensemble, models.front().src_vocab, models.front().tgt_vocab, bpe.get(), lines, opt);

  Output out(output, io);
  for (const auto& t : result) *out << t.text << '\n';
  out.close();
  if (!kbest_path.empty()) {
    Output kb(kbest_path, io);
    for (const auto& t : result)
      for (const auto& e : t.kbest) write_kbest_entry(*kb, e);
    kb.close();
  }
}

inline void cmd_lm_train(const RunConfig& rc, const std::string& input, const std::string& output, Io& io) {
  const auto sentences = lm_sentences(input_lines(input, io));
  const NGramLM lm = train_lm(sentences, rc.lm_order);
  Output out(output, io);
  lm.write_arpa(*out);
  out.close();
  io.err << "order " << lm.order() << " model over " << lm.words().size() << " types\n";
}

inline void cmd_lm_interpolate(const std::vector<std::string>& lms, const std::string& dev_path,
                               const std::string& output, Io& io) {
  if (lms.empty()) throw ArgumentError("lm-interpolate: at least one --lm is required");
  if (output.empty() || output == "-") throw ArgumentError("lm-interpolate: -o must name a file");
  std::vector<std::shared_ptr<const LanguageModel>> comps;
  for (const auto& p : lms) comps.push_back(std::make_shared<NGramLM>(load_arpa(p)));
  const auto dev = lm_sentences(read_lines(dev_path));
  const auto r = tune_interpolation(comps, dev);
  std::vector<std::string> rel;
  const fs::path base = fs::absolute(output).parent_path();
  for (const auto& p : lms) rel.push_back(fs::relative(fs::absolute(p), base).string());
  Output out(output, io);
  write_mixture(*out, r.weights, rel);
  out.close();
  for (std::size_t i = 0; i < lms.size(); ++i)
    io.err << lms[i] << ": weight " << r.weights[i] << " perplexity " << r.component_perplexity[i] << '\n';
  io.err << "interpolated perplexity " << r.perplexity << " after " << r.iterations << " EM iterations\n";
}

inline void cmd_rerank(const std::string& kbest_path, const std::string& lm_path, const std::string& weights_path,
                       const std::string& output, const std::string& kbest_out, Io& io) {
  const auto lists = load_kbest(kbest_path);
  const auto lm = load_language_model(lm_path);
  RerankWeights w;
  if (!weights_path.empty()) {
    std::ifstream in(weights_path);
    if (!in) throw IoError("cannot open weights " + weights_path);
    w = read_rerank_weights(in);
  }
  Output out(output, io);
  std::unique_ptr<Output> kb;
  if (!kbest_out.empty()) kb = std::make_unique<Output>(kbest_out, io);
  for (const auto& l : lists) {
    if (l.empty()) {
      *out << '\n';
      continue;
    }
    const auto ranked = rerank(l, *lm, w);
    *out << hypothesis_text(ranked.front()) << '\n';
    if (kb)
      for (const auto& e : ranked) write_kbest_entry(**kb, e);
  }
  out.close();
  if (kb) kb->close();
}

inline void cmd_rerank_tune(const RunConfig& rc, const std::string& kbest_path, const std::vector<std::string>& refs,
                            const std::string& lm_path, const std::string& output, Io& io) {
  const auto lists = load_kbest(kbest_path);
  const auto lm = load_language_model(lm_path);
  const auto r = tune_rerank_weights(lists, references(refs, lists.size()), *lm, default_rerank_grid(), rc.eval.bp,
                                     rc.eval.case_mode);
  Output out(output, io);
  write_rerank_weights(*out, r.weights);
  out.close();
  io.err << "dev BLEU " << r.baseline_bleu << " -> " << r.bleu << " over " << r.evaluated << " weight settings\n";
}

inline void cmd_score(const RunConfig& rc, const std::string& input, const std::vector<std::string>& refs, Io& io) {
  const auto hyps = input_lines(input, io);
  io.out << format_bleu(bleu(hyps, references(refs, hyps.size()), rc.eval.bp, rc.eval.case_mode)) << '\n';
}

inline void cmd_significance(const RunConfig& rc, const std::string& a, const std::string& b,
                             const std::vector<std::string>& refs, Io& io) {
  const auto ha = read_lines(a), hb = read_lines(b);
  const auto r = bootstrap_significance(ha, hb, references(refs, ha.size()), rc.eval.bootstrap_samples, rc.eval.seed,
                                        rc.eval.bp, rc.eval.case_mode);
  io.out << "BLEU(A) - BLEU(B) = " << format_score(r.difference) << " p = " << format_score(r.p_value)
         << " resamples = " << r.resamples << '\n';
}

}  // namespace cli_detail

/// Entry point of the command-line tool. Returns the process exit status.
inline int run_cli(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  Io io{in, out, err};
  CLI::App app{"Attention-based neural machine translation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "INI configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "Override a config value: section.key=value")->take_all();

  std::string input, output, merges, kbest, lm, weights, dev, kbest_out, hyp_a, hyp_b;
  std::vector<std::string> inputs, checkpoints, refs, lms, extra_raw;

  auto* bpe_learn = app.add_subcommand("bpe-learn", "Learn BPE merges from tokenized text");
  bpe_learn->add_option("-i,--input", inputs, "Training text files")->required()->check(CLI::ExistingFile);
  bpe_learn->add_option("-o,--output", output, "Merge file (default stdout)");

  auto* bpe_apply = app.add_subcommand("bpe-apply", "Segment text with learned merges");
  bpe_apply->add_option("-m,--merges", merges, "Merge file")->required()->check(CLI::ExistingFile);
  bpe_apply->add_option("-i,--input", input, "Input text (default stdin)");
  bpe_apply->add_option("-o,--output", output, "Output (default stdout)");

  auto* train_cmd = app.add_subcommand("train", "Train a model; paths come from the config");
  train_cmd->add_option("--add-corpus", extra_raw, "Extra parallel corpus: SRC TGT MULTIPLIER")
      ->type_size(3)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);

  auto* translate = app.add_subcommand("translate", "Translate with one model or an ensemble");
  translate->add_option("--checkpoint", checkpoints, "Model checkpoint (repeat for an ensemble)")
      ->required()
      ->check(CLI::ExistingFile);
  translate->add_option("-i,--input", input, "Source text (default stdin)");
  translate->add_option("-o,--output", output, "Translations (default stdout)");
  translate->add_option("--kbest", kbest, "Also write a k-best list here");

  auto* lm_train = app.add_subcommand("lm-train", "Train an n-gram language model");
  lm_train->add_option("-i,--input", input, "Text (default stdin)");
  lm_train->add_option("-o,--output", output, "ARPA file (default stdout)");

  auto* lm_interp = app.add_subcommand("lm-interpolate", "Tune mixture weights of language models on dev text");
  lm_interp->add_option("--lm", lms, "Component ARPA file (repeatable)")->required()->check(CLI::ExistingFile);
  lm_interp->add_option("--dev", dev, "Dev text")->required()->check(CLI::ExistingFile);
  lm_interp->add_option("-o,--output", output, "Mixture file")->required();

  auto* rerank_cmd = app.add_subcommand("rerank", "Re-rank k-best lists with a language model");
  rerank_cmd->add_option("--kbest", kbest, "k-best file")->required()->check(CLI::ExistingFile);
  rerank_cmd->add_option("--lm", lm, "ARPA or mixture file")->required()->check(CLI::ExistingFile);
  rerank_cmd->add_option("--weights", weights, "Weights file (default: nmt score only)")->check(CLI::ExistingFile);
  rerank_cmd->add_option("-o,--output", output, "1-best output (default stdout)");
  rerank_cmd->add_option("--kbest-out", kbest_out, "Re-ranked k-best file with feature columns");

  auto* tune = app.add_subcommand("rerank-tune", "Grid-search re-ranking weights on dev BLEU");
  tune->add_option("--kbest", kbest, "Dev k-best file")->required()->check(CLI::ExistingFile);
  tune->add_option("--ref", refs, "Reference file (repeatable)")->required()->check(CLI::ExistingFile);
  tune->add_option("--lm", lm, "ARPA or mixture file")->required()->check(CLI::ExistingFile);
  tune->add_option("-o,--output", output, "Weights file (default stdout)");

  auto* score = app.add_subcommand("score", "Corpus BLEU");
  score->add_option("-i,--input", input, "Hypotheses (default stdin)");
  score->add_option("--ref", refs, "Reference file (repeatable)")->required()->check(CLI::ExistingFile);

  auto* sig = app.add_subcommand("significance", "Paired bootstrap test of system A against system B");
  sig->add_option("-a", hyp_a, "Hypotheses of system A")->required()->check(CLI::ExistingFile);
  sig->add_option("-b", hyp_b, "Hypotheses of system B")->required()->check(CLI::ExistingFile);
  sig->add_option("--ref", refs, "Reference file (repeatable)")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig rc = config_path.empty() ? RunConfig{} : load_config(config_path);
    for (const auto& o : overrides) apply_override(rc, o);

    if (*bpe_learn) {
      cmd_bpe_learn(rc, inputs, output, io);
    } else if (*bpe_apply) {
      cmd_bpe_apply(rc, merges, input, output, io);
    } else if (*train_cmd) {
      std::vector<ExtraCorpus> extra;
      for (std::size_t i = 0; i + 2 < extra_raw.size(); i += 3)
        extra.push_back({extra_raw[i], extra_raw[i + 1], detail::parse_size("--add-corpus multiplier", extra_raw[i + 2])});
      cmd_train(rc, extra, io);
    } else if (*translate) {
      cmd_translate(rc, checkpoints, input, output, kbest, io);
    } else if (*lm_train) {
      cmd_lm_train(rc, input, output, io);
    } else if (*lm_interp) {
      cmd_lm_interpolate(lms, dev, output, io);
    } else if (*rerank_cmd) {
      cmd_rerank(kbest, lm, weights, output, kbest_out, io);
    } else if (*tune) {
      cmd_rerank_tune(rc, kbest, refs, lm, output, io);
    } else if (*score) {
      cmd_score(rc, input, refs, io);
    } else if (*sig) {
      cmd_significance(rc, hyp_a, hyp_b, refs, io);
    }
  } catch (const std::exception& e) {
    err << "nmtkit: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

inline int run_cli(int argc, const char* const* argv) { return run_cli(argc, argv, std::cin, std::cout, std::cerr); }

}  // namespace nmt
