#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <random>
#include <vector>

#include "nmtkit/model.hpp"

namespace nmt {

struct TrainConfig {
  std::size_t batch_size = 40;
  double learning_rate = 1e-4;
  double clip_norm = 1.0;
  std::size_t checkpoint_interval = 10000;
  std::size_t patience = 10;
  std::size_t max_length = 50;  // subwords per side, applied when loading corpora
  std::uint64_t seed = 1;
  std::size_t max_updates = 0;  // 0 = no cap

  void validate() const {
    if (batch_size == 0 || !(learning_rate > 0) || !(clip_norm > 0) || checkpoint_interval == 0 || patience == 0 ||
        max_length == 0)
      throw ArgumentError("invalid train config: all numeric fields must be positive");
  }
};

/// Source and target token ids, without the end symbol.
struct SentencePair {
  std::vector<int> src, tgt;
};

/// Sentence pairs with integer repetition weights. An epoch visits pair i
/// weight[i] times; an empty weight vector means weight 1 everywhere.
struct IdCorpus {
  std::vector<SentencePair> pairs;
  std::vector<std::size_t> weights;

  std::size_t weight(std::size_t i) const { return weights.empty() ? 1 : weights[i]; }

  std::size_t instances() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i) n += weight(i);
    return n;
  }
};

struct Batch {
  PaddedBatch src, tgt;  // targets carry the end symbol
  std::vector<std::size_t> indices;

  std::size_t pairs() const { return src.batch; }
};

inline Batch make_batch(const IdCorpus& corpus, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ArgumentError("empty batch");
  std::vector<std::vector<int>> src, tgt;
  for (std::size_t i : indices) {
    const auto& p = corpus.pairs.at(i);
    src.push_back(p.src);
    tgt.push_back(p.tgt);
    tgt.back().push_back(kEos);
  }
  return {PaddedBatch::from(src), PaddedBatch::from(tgt), indices};
}

namespace detail {

// Unbiased draw in [0, n) by rejection; fixed across standard libraries.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do r = rng();
  while (r >= limit);
  return r % n;
}

}  // namespace detail

/// Pair indices of one epoch (each pair repeated by its weight), shuffled
/// deterministically per (seed, epoch).
inline std::vector<std::size_t> epoch_order(const IdCorpus& corpus, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order;
  order.reserve(corpus.instances());
  for (std::size_t i = 0; i < corpus.pairs.size(); ++i)
    for (std::size_t k = 0; k < corpus.weight(i); ++k) order.push_back(i);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[detail::bounded(rng, i)]);
  return order;
}

inline std::vector<Batch> make_batches(const IdCorpus& corpus, std::size_t size, std::uint64_t seed,
                                       std::uint64_t epoch = 0) {
  if (size == 0) throw ArgumentError("make_batches: batch size must be >= 1");
  auto order = epoch_order(corpus, seed, epoch);
  std::vector<Batch> out;
  for (std::size_t b = 0; b < order.size(); b += size) {
    std::vector<std::size_t> idx(order.begin() + b, order.begin() + std::min(order.size(), b + size));
    out.push_back(make_batch(corpus, idx));
  }
  return out;
}

/// Summed target negative log-likelihood divided by the number of pairs.
template <class Real>
Var<Real> nll_loss(const BoundModel<Real>& m, const Batch& batch) {
  if (batch.pairs() == 0) throw ArgumentError("nll_loss: empty batch");
  return scale(batch_nll(m, batch.src, batch.tgt), Real(1) / static_cast<Real>(batch.pairs()));
}

template <class Real>
double nll_loss(const ModelParams<Real>& params, const Batch& batch) {
  Tape<Real> tape(false);
  return nll_loss(bind(tape, params), batch).value().item();
}

/// Mean per-pair loss over a whole corpus (weights ignored).
template <class Real>
double corpus_loss(const ModelParams<Real>& params, const IdCorpus& corpus, std::size_t batch_size = 40) {
  if (corpus.pairs.empty()) throw ArgumentError("corpus_loss: empty corpus");
  double total = 0;
  for (std::size_t b = 0; b < corpus.pairs.size(); b += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(corpus.pairs.size(), b + batch_size); ++i) idx.push_back(i);
    Batch batch = make_batch(corpus, idx);
    Tape<Real> tape(false);
    total += batch_nll(bind(tape, params), batch.src, batch.tgt).value().item();
  }
  return total / double(corpus.pairs.size());
}

template <class Real>
double global_norm(const std::vector<Tensor<Real>>& grads) {
  double sq = 0;
  for (const auto& g : grads)
    for (auto v : g.data()) sq += double(v) * double(v);
  return std::sqrt(sq);
}

/// Rescales all gradients by max_norm / g when their global L2 norm g
/// exceeds max_norm. Returns g.
template <class Real>
double clip_gradients(std::vector<Tensor<Real>>& grads, double max_norm) {
  if (!(max_norm > 0)) throw ArgumentError("clip_gradients: max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& g : grads)
      for (auto& v : g.data()) v = static_cast<Real>(double(v) * f);
  }
  return norm;
}

template <class Real>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<Tensor<Real>> m, v;
};

/// One bias-corrected Adam step over params (in for_each_weight order).
template <class Real>
void adam_update(AdamState<Real>& st, const std::vector<Tensor<Real>*>& params, const std::vector<Tensor<Real>>& grads,
                 double lr) {
  if (params.size() != grads.size()) throw DimensionError("adam_update: parameter and gradient counts differ");
  if (st.m.empty()) {
    for (const auto* p : params) {
      st.m.emplace_back(p->shape());
      st.v.emplace_back(p->shape());
    }
  }
  if (st.m.size() != params.size()) throw DimensionError("adam_update: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (params[i]->shape() != grads[i].shape() || st.m[i].shape() != grads[i].shape())
      throw DimensionError("adam_update: shape mismatch " + shape_string(params[i]->shape()) + " vs " +
                           shape_string(grads[i].shape()));
  ++st.t;
  const double c1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto m = st.m[i].data();
    auto v = st.v[i].data();
    auto g = grads[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = st.beta1 * double(m[k]) + (1 - st.beta1) * gk;
      const double vk = st.beta2 * double(v[k]) + (1 - st.beta2) * gk * gk;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      p[k] = static_cast<Real>(double(p[k]) - lr * (mk / c1) / (std::sqrt(vk / c2) + st.eps));
    }
  }
}

/// Patience-based stopping on a sequence of dev losses. A loss counts as an
/// improvement only when strictly below the best so far.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw ArgumentError("patience must be >= 1");
  }

  /// Records one checkpoint's loss; returns true if it is the new best.
  bool observe(double loss) {
    ++seen_;
    if (loss < best_) {
      best_ = loss;
      best_index_ = seen_ - 1;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }

  bool should_stop() const { return bad_ >= patience_; }
  double best() const { return best_; }
  std::size_t best_index() const { return best_index_; }  // 0-based
  std::size_t seen() const { return seen_; }
  std::size_t bad_streak() const { return bad_; }

 private:
  std::size_t patience_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_index_ = 0;
  std::size_t seen_ = 0;
  std::size_t bad_ = 0;
};

template <class Real>
struct Checkpoint {
  ModelParams<Real> params;
  std::uint64_t updates = 0;
  double dev_loss = std::numeric_limits<double>::infinity();
};

template <class Real>
struct TrainHooks {
  // Replaces the dev-set loss computation (used to script loss sequences).
  std::function<double(const ModelParams<Real>&)> dev_loss;
  // Called after every checkpoint evaluation; `best` tells whether it is the new minimum.
  std::function<void(const Checkpoint<Real>&, bool best)> on_checkpoint;
  std::ostream* log = nullptr;
};

template <class Real>
struct TrainResult {
  Checkpoint<Real> best;
  std::vector<double> dev_losses;
  std::uint64_t updates = 0;
  bool early_stopped = false;
};

/// Mini-batch training with clipping and Adam; evaluates the dev loss every
/// checkpoint_interval updates (and once more when the update cap ends a
/// partial interval) and stops after `patience` checkpoints without a new
/// minimum. Returns the minimum-dev-loss checkpoint.
template <class Real>
TrainResult<Real> train(ModelParams<Real>& params, const IdCorpus& train_corpus, const IdCorpus& dev_corpus,
                        const TrainConfig& tc, const TrainHooks<Real>& hooks = {}) {
  tc.validate();
  if (train_corpus.pairs.empty()) throw ArgumentError("train: empty training corpus");
  if (dev_corpus.pairs.empty() && !hooks.dev_loss) throw ArgumentError("train: empty dev corpus");

  TrainResult<Real> result;
  result.best.params = params;
  EarlyStopper stopper(tc.patience);
  AdamState<Real> adam;
  auto slots = params.named();
  std::vector<Tensor<Real>*> ptrs;
  for (auto& s : slots) ptrs.push_back(s.second);

  double train_sum = 0;
  std::size_t train_batches = 0;
  auto checkpoint = [&] {
    const double dev = hooks.dev_loss ? hooks.dev_loss(params) : corpus_loss(params, dev_corpus, tc.batch_size);
    result.dev_losses.push_back(dev);
    const bool best = stopper.observe(dev);
    Checkpoint<Real> cp{params, result.updates, dev};
    if (hooks.log)
      *hooks.log << "update " << result.updates << " train_loss "
                 << (train_batches ? train_sum / double(train_batches) : 0.0) << " dev_loss " << dev
                 << (best ? " *" : "") << '\n';
    train_sum = 0;
    train_batches = 0;
    if (hooks.on_checkpoint) hooks.on_checkpoint(cp, best);
    if (best) result.best = std::move(cp);
  };

  for (std::uint64_t epoch = 0;; ++epoch) {
    for (const Batch& batch : make_batches(train_corpus, tc.batch_size, tc.seed, epoch)) {
      Tape<Real> tape;
      BoundModel<Real> m = bind(tape, params);
      Var<Real> loss = nll_loss(m, batch);
      tape.backward(loss);
      std::vector<Tensor<Real>> grads = collect_gradients(m);
      clip_gradients(grads, tc.clip_norm);
      adam_update(adam, ptrs, grads, tc.learning_rate);
      ++result.updates;
      train_sum += loss.value().item();
      ++train_batches;

      const bool capped = tc.max_updates && result.updates >= tc.max_updates;
      if (result.updates % tc.checkpoint_interval == 0 || (capped && train_batches > 0)) {
        checkpoint();
        if (stopper.should_stop()) {
          result.early_stopped = true;
          return result;
        }
      }
      if (capped) return result;
    }
  }
}

}  // namespace nmt
