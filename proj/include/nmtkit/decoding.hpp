#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nmtkit/bpe.hpp"
#include "nmtkit/model.hpp"
#include "nmtkit/utf8.hpp"
#include "nmtkit/vocab.hpp"

namespace nmt {

/// Non-owning list of models decoded together. Members must share the
/// target vocabulary.
template <class Real>
struct Ensemble {
  std::vector<const ModelParams<Real>*> members;

  Ensemble() = default;
  Ensemble(std::initializer_list<const ModelParams<Real>*> m) : members(m) { validate(); }
  explicit Ensemble(std::vector<const ModelParams<Real>*> m) : members(std::move(m)) { validate(); }

  std::size_t tgt_vocab() const { return members.front()->config.tgt_vocab; }

  void validate() const {
    if (members.empty()) throw ArgumentError("ensemble has no members");
    for (const auto* m : members)
      if (m->config.tgt_vocab != members.front()->config.tgt_vocab)
        throw ArgumentError("ensemble members disagree on the target vocabulary size (" +
                            std::to_string(m->config.tgt_vocab) + " vs " +
                            std::to_string(members.front()->config.tgt_vocab) + ")");
  }
};

/// Mean of member log-distributions, renormalised per row so that the
/// probabilities sum to one.
template <class Real>
Tensor<double> combine_log_probs(const std::vector<Tensor<Real>>& member_log_probs) {
  if (member_log_probs.empty()) throw ArgumentError("combine_log_probs: no members");
  const Shape& shape = member_log_probs.front().shape();
  for (const auto& t : member_log_probs)
    if (t.shape() != shape) throw ArgumentError("combine_log_probs: member distributions differ in shape");
  Tensor<double> out(shape);
  const double n = double(member_log_probs.size());
  for (const auto& t : member_log_probs)
    for (std::size_t i = 0; i < t.size(); ++i) out[i] += double(t[i]) / n;
  detail::log_softmax_rows_inplace(out);
  return out;
}

/// Decoder states of every member for a set of live hypotheses of one
/// source sentence.
template <class Real>
class DecodeSession {
 public:
  DecodeSession(const Ensemble<Real>& ensemble, const std::vector<int>& src) {
    ensemble.validate();
    if (src.empty()) throw ArgumentError("decode: empty source");
    for (const auto* p : ensemble.members) {
      auto m = std::make_unique<Member>();
      m->bound = bind(m->tape, *p);
      m->single = encode(m->bound, PaddedBatch::from({src}));
      m->state = initial_decoder_state(m->bound, 1);
      members_.push_back(std::move(m));
    }
    rows_ = 1;
  }

  std::size_t rows() const { return rows_; }

  /// Advances every member by one token per row and returns the combined
  /// log-distribution [rows x vocab].
  Tensor<double> step(const std::vector<int>& y_prev) {
    if (y_prev.size() != rows_) throw DimensionError("decode step: token count does not match live rows");
    std::vector<Tensor<Real>> lps;
    for (auto& m : members_) {
      auto out = decoder_step(m->bound, y_prev, m->state, tiled(*m, rows_));
      m->state = std::move(out.state);
      lps.push_back(log_softmax(out.logits.value()));
    }
    return combine_log_probs(lps);
  }

  /// Keeps the rows listed in `parents` (with repetition) as the new rows.
  void reorder(const std::vector<std::size_t>& parents) {
    for (auto& m : members_)
      for (auto& layer : m->state.layers) {
        layer.hidden = gather(m->tape, layer.hidden, parents);
        if (layer.cell) layer.cell = gather(m->tape, *layer.cell, parents);
      }
    rows_ = parents.size();
  }

 private:
  struct Member {
    Tape<Real> tape{false};
    BoundModel<Real> bound;
    Annotation<Real> single;
    std::map<std::size_t, Annotation<Real>> tiles;
    DecoderState<Real> state;
  };

  static Var<Real> gather(Tape<Real>& tape, const Var<Real>& v, const std::vector<std::size_t>& rows) {
    const Tensor<Real>& x = v.value();
    const std::size_t c = x.cols();
    Tensor<Real> out(Shape{rows.size(), c});
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy_n(x.ptr() + rows[r] * c, c, out.ptr() + r * c);
    return tape.constant(std::move(out));
  }

  // Annotation of the single source repeated for n rows.
  const Annotation<Real>& tiled(Member& m, std::size_t n) {
    if (n == 1) return m.single;
    auto it = m.tiles.find(n);
    if (it != m.tiles.end()) return it->second;
    const std::size_t len = m.single.length;
    std::vector<std::size_t> rows;
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t b = 0; b < n; ++b) rows.push_back(j);
    Annotation<Real> a;
    a.values = gather(m.tape, m.single.values, rows);
    a.keys = gather(m.tape, m.single.keys, rows);
    a.mask.assign(len * n, 1);
    a.length = len;
    a.batch = n;
    return m.tiles.emplace(n, std::move(a)).first->second;
  }

  std::vector<std::unique_ptr<Member>> members_;
  std::size_t rows_ = 0;
};

/// A finished translation candidate. tokens end with the end symbol;
/// score = logprob / tokens.size().
struct Hypothesis {
  std::vector<int> tokens;
  double logprob = 0;
  double score = 0;
};

using KBest = std::vector<Hypothesis>;

struct BeamOptions {
  std::size_t beam_size = 12;
  std::size_t k = 1;
  double max_len_factor = 3.0;

  std::size_t max_length(std::size_t src_len) const {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(max_len_factor * double(src_len))));
  }
};

/// Beam search over the ensemble's combined distribution. The live beam
/// holds beam_size minus the number of finished hypotheses; at the last
/// allowed position only the end symbol may be chosen. The begin symbol is
/// never generated. Returns the k best finished hypotheses by score.
template <class Real>
KBest beam_search(const Ensemble<Real>& ensemble, const std::vector<int>& src, const BeamOptions& opt) {
  if (opt.beam_size == 0) throw ArgumentError("beam_search: beam size must be >= 1");
  if (opt.k == 0 || opt.k > opt.beam_size)
    throw ArgumentError("beam_search: k must be in [1, beam size], got k=" + std::to_string(opt.k) +
                        " beam=" + std::to_string(opt.beam_size));
  if (!(opt.max_len_factor > 0)) throw ArgumentError("beam_search: max length factor must be positive");
  DecodeSession<Real> session(ensemble, src);
  const std::size_t max_len = opt.max_length(src.size());
  const std::size_t V = ensemble.tgt_vocab();

  struct Live {
    std::vector<int> tokens;
    double logprob;
  };
  std::vector<Live> live{{{}, 0.0}};
  KBest finished;

  for (std::size_t t = 0; t < max_len && !live.empty() && finished.size() < opt.beam_size; ++t) {
    std::vector<int> prev;
    for (const auto& h : live) prev.push_back(h.tokens.empty() ? kBos : h.tokens.back());
    const Tensor<double> lp = session.step(prev);

    struct Cand {
      double logprob;
      std::size_t row;
      int token;
    };
    std::vector<Cand> cands;
    const bool last = t + 1 == max_len;
    for (std::size_t r = 0; r < live.size(); ++r) {
      if (last) {
        cands.push_back({live[r].logprob + lp(r, kEos), r, kEos});
        continue;
      }
      for (std::size_t v = 0; v < V; ++v) {
        if (static_cast<int>(v) == kBos) continue;
        cands.push_back({live[r].logprob + lp(r, v), r, static_cast<int>(v)});
      }
    }
    const std::size_t slots = std::min(opt.beam_size - finished.size(), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + slots, cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.row != b.row ? a.row < b.row : a.token < b.token;
    });

    std::vector<Live> next;
    std::vector<std::size_t> parents;
    for (std::size_t i = 0; i < slots; ++i) {
      const Cand& c = cands[i];
      std::vector<int> tokens = live[c.row].tokens;
      tokens.push_back(c.token);
      if (c.token == kEos) {
        const double n = double(tokens.size());
        finished.push_back({std::move(tokens), c.logprob, c.logprob / n});
      } else {
        next.push_back({std::move(tokens), c.logprob});
        parents.push_back(c.row);
      }
    }
    live = std::move(next);
    if (!live.empty()) session.reorder(parents);
  }

  std::stable_sort(finished.begin(), finished.end(),
                   [](const Hypothesis& a, const Hypothesis& b) { return a.score > b.score; });
  if (finished.size() > opt.k) finished.resize(opt.k);
  return finished;
}

/// Step-by-step argmax decoding (never emits the begin symbol).
template <class Real>
Hypothesis greedy_decode(const Ensemble<Real>& ensemble, const std::vector<int>& src, double max_len_factor = 3.0) {
  BeamOptions opt;
  opt.beam_size = 1;
  opt.k = 1;
  opt.max_len_factor = max_len_factor;
  return beam_search(ensemble, src, opt).front();
}

/// One line of a k-best file: `sentence ||| hypothesis ||| nmt score`,
/// optionally followed by further ` ||| ` fields.
struct KBestEntry {
  std::size_t sentence = 0;
  std::string hypothesis;
  double nmt_score = 0;
  std::vector<std::string> extra;
};

inline std::string format_score(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline void write_kbest_entry(std::ostream& os, const KBestEntry& e) {
  os << e.sentence << " ||| " << e.hypothesis << " ||| " << format_score(e.nmt_score);
  for (const auto& f : e.extra) os << " ||| " << f;
  os << '\n';
}

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

/// Reads a k-best file grouped by sentence id. Ids must be non-decreasing;
/// ids with no lines in between become empty groups.
inline std::vector<std::vector<KBestEntry>> read_kbest(std::istream& is) {
  std::vector<std::vector<KBestEntry>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::size_t pos = 0;
    for (;;) {
      const auto next = line.find("|||", pos);
      fields.push_back(detail::trim(line.substr(pos, next == std::string::npos ? std::string::npos : next - pos)));
      if (next == std::string::npos) break;
      pos = next + 3;
    }
    auto fail = [&](const std::string& what) {
      throw FormatError("k-best line " + std::to_string(lineno) + ": " + what);
    };
    if (fields.size() < 3) fail("expected 'id ||| hypothesis ||| score'");
    KBestEntry e;
    try {
      std::size_t used = 0;
      const long long id = std::stoll(fields[0], &used);
      if (used != fields[0].size() || id < 0) fail("bad sentence id");
      e.sentence = static_cast<std::size_t>(id);
      e.nmt_score = std::stod(fields[2], &used);
      if (used != fields[2].size()) fail("bad score");
    } catch (const std::logic_error&) {
      fail("unparsable number");
    }
    e.hypothesis = fields[1];
    e.extra.assign(fields.begin() + 3, fields.end());
    if (e.sentence + 1 < out.size()) fail("sentence ids must be non-decreasing");
    if (out.size() <= e.sentence) out.resize(e.sentence + 1);
    out[e.sentence].push_back(std::move(e));
  }
  return out;
}

/// Subword strings back to words; a dangling continuation at the end of
/// a generated sequence is closed rather than rejected.
inline std::string detokenize(const std::vector<std::string>& subwords) {
  std::vector<SubwordToken> t = parse_subwords([&] {
    std::string s;
    for (const auto& w : subwords) s += w + ' ';
    return s;
  }());
  if (!t.empty()) t.back().continues = false;
  std::string out;
  for (const auto& w : undo_bpe(t)) out += (out.empty() ? "" : " ") + w;
  return out;
}

struct Translation {
  std::string text;               // detokenized best hypothesis
  std::vector<KBestEntry> kbest;  // subword hypotheses, best first
};

struct TranslateOptions {
  BeamOptions beam;
  std::size_t threads = 1;
};

/// Source line -> subword ids (BPE applied when a model is given).
inline std::vector<int> prepare_source(const std::string& line, const Vocab& src_vocab, const BpeModel* bpe) {
  std::vector<std::string> words = split_whitespace(line);
  if (bpe) {
    std::vector<std::string> pieces;
    for (const auto& t : bpe->apply(words)) pieces.push_back(t.continues ? t.text + std::string(kContinuation) : t.text);
    words = std::move(pieces);
  }
  return src_vocab.encode(words);
}

/// Translates lines independently (optionally on several threads); output
/// order and content do not depend on the thread count. An empty line
/// yields an empty translation with a single empty k-best entry.
template <class Real>
std::vector<Translation> translate_lines(const Ensemble<Real>& ensemble, const Vocab& src_vocab,
                                         const Vocab& tgt_vocab, const BpeModel* bpe,
                                         const std::vector<std::string>& lines, const TranslateOptions& opt) {
  ensemble.validate();
  if (tgt_vocab.size() != ensemble.tgt_vocab())
    throw ArgumentError("target vocabulary size " + std::to_string(tgt_vocab.size()) +
                        " does not match the models (" + std::to_string(ensemble.tgt_vocab()) + ")");
  for (std::size_t i = 0; i < lines.size(); ++i)
    if (auto bad = utf8::first_invalid(lines[i]))
      throw FormatError("line " + std::to_string(i + 1) + ": invalid UTF-8 at byte " + std::to_string(*bad));

  std::vector<Translation> out(lines.size());
  auto work = [&](std::size_t i) {
    Translation& tr = out[i];
    const std::vector<int> src = prepare_source(lines[i], src_vocab, bpe);
    if (src.empty()) {
      tr.kbest.push_back({i, "", 0.0, {}});
      return;
    }
    const KBest hyps = beam_search(ensemble, src, opt.beam);
    for (const auto& h : hyps) {
      std::vector<std::string> toks = tgt_vocab.decode(h.tokens);
      std::string joined;
      for (const auto& t : toks) joined += (joined.empty() ? "" : " ") + t;
      tr.kbest.push_back({i, joined, h.score, {}});
    }
    tr.text = detokenize(tgt_vocab.decode(hyps.front().tokens));
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, lines.size()));
  if (threads <= 1) {
    for (std::size_t i = 0; i < lines.size(); ++i) work(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < lines.size();) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
  return out;
}

}  // namespace nmt
