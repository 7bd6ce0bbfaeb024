#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "nmtkit/rnn.hpp"

namespace nmt {

// Reserved vocabulary ids shared by source and target sides.
inline constexpr int kUnk = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

enum class Architecture { deep_stacked, deep_transition };

inline const char* to_string(Architecture a) {
  return a == Architecture::deep_stacked ? "deep_stacked" : "deep_transition";
}

struct ModelConfig {
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t embed = 500;
  std::size_t hidden = 1024;
  std::size_t align = 0;  // attention width; 0 means "same as hidden"
  UnitType unit = UnitType::gru;
  Architecture arch = Architecture::deep_stacked;
  std::size_t enc_depth = 4;        // D_x, stacked layers per encoder direction
  std::size_t dec_depth = 4;        // D_y, stacked decoder layers
  std::size_t enc_transitions = 4;  // L_x
  std::size_t dec_transitions = 8;  // L_y, counting the attention transition
  bool layer_norm = true;
  bool tie_embeddings = true;

  std::size_t align_dim() const { return align ? align : hidden; }

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw ArgumentError("invalid model config: " + what);
    };
    need(src_vocab > static_cast<std::size_t>(kEos), "source vocabulary must hold the reserved symbols");
    need(tgt_vocab > static_cast<std::size_t>(kEos), "target vocabulary must hold the reserved symbols");
    need(embed > 0 && hidden > 0, "embedding and hidden sizes must be positive");
    need(enc_depth >= 1 && dec_depth >= 1, "stack depths must be >= 1");
    need(enc_transitions >= 1, "encoder transitions must be >= 1");
    need(dec_transitions >= 2, "decoder transitions must be >= 2");
    need(!layer_norm || (hidden >= 2), "layer normalisation needs hidden >= 2");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class T>
struct AttentionWeights {
  T W_a, U_a, b_a, v_a, beta;
};

template <class T>
struct OutputWeights {
  T U_t, V_t, C_t, b_t;
  T W_t;  // absent when the target embedding is tied
};

/// Every weight of one model. Encoder units are indexed [direction][k]
/// where direction 0 is the forward encoder and k is the stack layer or
/// transition. Decoder units: k = 0 is the pre-attention transition, k = 1
/// the attention transition, and k >= 2 either stack layers 2..D_y or
/// transitions 3..L_y.
template <class T>
struct ModelWeights {
  T src_embed, tgt_embed;
  std::array<std::vector<UnitWeights<T>>, 2> encoder;
  std::vector<UnitWeights<T>> decoder;
  AttentionWeights<T> attention;
  OutputWeights<T> output;
};

namespace detail {
template <class Real>
bool present(const Tensor<Real>& t) {
  return !t.empty();
}
template <class Real>
bool present(const Var<Real>& v) {
  return v.valid();
}

template <class U, class F>
void for_each_unit_weight(const std::string& prefix, U& u, F& f) {
  const auto& g = gate_names(u.type);
  for (std::size_t k = 0; k < u.W.size(); ++k) f(prefix + "W_" + g[k], u.W[k]);
  for (std::size_t k = 0; k < u.U.size(); ++k) f(prefix + "U_" + g[k], u.U[k]);
  for (std::size_t k = 0; k < u.b.size(); ++k) f(prefix + "b_" + g[k], u.b[k]);
  for (std::size_t k = 0; k < u.ln_gain.size(); ++k) f(prefix + "ln_gain_" + g[k], u.ln_gain[k]);
  for (std::size_t k = 0; k < u.ln_bias.size(); ++k) f(prefix + "ln_bias_" + g[k], u.ln_bias[k]);
}
}  // namespace detail

/// Calls f(name, weight) for every stored weight, in a fixed order.
template <class W, class F>
void for_each_weight(W& w, F&& f) {
  f(std::string("src_embed"), w.src_embed);
  f(std::string("tgt_embed"), w.tgt_embed);
  const char* dir[2] = {"fwd", "bwd"};
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t k = 0; k < w.encoder[d].size(); ++k)
      detail::for_each_unit_weight("enc." + std::string(dir[d]) + "." + std::to_string(k) + ".",
                                   w.encoder[d][k], f);
  for (std::size_t k = 0; k < w.decoder.size(); ++k)
    detail::for_each_unit_weight("dec." + std::to_string(k) + ".", w.decoder[k], f);
  f(std::string("att.W_a"), w.attention.W_a);
  f(std::string("att.U_a"), w.attention.U_a);
  f(std::string("att.b_a"), w.attention.b_a);
  f(std::string("att.v_a"), w.attention.v_a);
  f(std::string("att.beta"), w.attention.beta);
  f(std::string("out.U_t"), w.output.U_t);
  f(std::string("out.V_t"), w.output.V_t);
  f(std::string("out.C_t"), w.output.C_t);
  f(std::string("out.b_t"), w.output.b_t);
  if (detail::present(w.output.W_t)) f(std::string("out.W_t"), w.output.W_t);
}

template <class Real>
struct ModelParams {
  ModelConfig config;
  ModelWeights<Tensor<Real>> weights;

  /// Entry (e, w) of the embed x vocab output projection. With tying this
  /// reads the target embedding table, so both views share storage.
  Real output_weight(std::size_t e, std::size_t w) const {
    return config.tie_embeddings ? weights.tgt_embed(w, e) : weights.output.W_t(e, w);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each_weight(weights, [&](const std::string&, const Tensor<Real>& t) { n += t.size(); });
    return n;
  }

  std::vector<std::pair<std::string, Tensor<Real>*>> named() {
    std::vector<std::pair<std::string, Tensor<Real>*>> out;
    for_each_weight(weights, [&](const std::string& n, Tensor<Real>& t) { out.emplace_back(n, &t); });
    return out;
  }
  std::vector<std::pair<std::string, const Tensor<Real>*>> named() const {
    std::vector<std::pair<std::string, const Tensor<Real>*>> out;
    for_each_weight(weights, [&](const std::string& n, const Tensor<Real>& t) { out.emplace_back(n, &t); });
    return out;
  }

  template <class Other>
  ModelParams<Other> cast() const;
};

/// Zero-filled parameters with the layout implied by cfg.
template <class Real>
ModelParams<Real> make_params(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams<Real> p;
  p.config = cfg;
  auto& w = p.weights;
  const std::size_t E = cfg.embed, H = cfg.hidden, A = cfg.align_dim();
  const bool ln = cfg.layer_norm;
  w.src_embed = Tensor<Real>(Shape{cfg.src_vocab, E});
  w.tgt_embed = Tensor<Real>(Shape{cfg.tgt_vocab, E});
  for (std::size_t d = 0; d < 2; ++d) {
    if (cfg.arch == Architecture::deep_stacked) {
      for (std::size_t l = 0; l < cfg.enc_depth; ++l)
        w.encoder[d].push_back(make_unit<Real>(cfg.unit, l == 0 ? E : H, H, ln));
    } else {
      for (std::size_t l = 0; l < cfg.enc_transitions; ++l)
        w.encoder[d].push_back(make_unit<Real>(cfg.unit, l == 0 ? E : 0, H, ln));
    }
  }
  w.decoder.push_back(make_unit<Real>(cfg.unit, E, H, ln));
  w.decoder.push_back(make_unit<Real>(cfg.unit, 2 * H, H, ln));
  if (cfg.arch == Architecture::deep_stacked) {
    for (std::size_t l = 1; l < cfg.dec_depth; ++l) w.decoder.push_back(make_unit<Real>(cfg.unit, H, H, ln));
  } else {
    for (std::size_t l = 2; l < cfg.dec_transitions; ++l) w.decoder.push_back(make_unit<Real>(cfg.unit, 0, H, ln));
  }
  w.attention = {Tensor<Real>(Shape{H, A}), Tensor<Real>(Shape{2 * H, A}), Tensor<Real>(Shape{A}),
                 Tensor<Real>(Shape{A, 1}), Tensor<Real>::scalar(0)};
  w.output.U_t = Tensor<Real>(Shape{H, E});
  w.output.V_t = Tensor<Real>(Shape{E, E});
  w.output.C_t = Tensor<Real>(Shape{2 * H, E});
  w.output.b_t = Tensor<Real>(Shape{E});
  if (!cfg.tie_embeddings) w.output.W_t = Tensor<Real>(Shape{E, cfg.tgt_vocab});
  return p;
}

template <class Real>
template <class Other>
ModelParams<Other> ModelParams<Real>::cast() const {
  ModelParams<Other> out = make_params<Other>(config);
  auto src = named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = src[i].second->template cast<Other>();
  return out;
}

/// Uniform draw in [0, 1) from the top 53 bits; independent of the
/// standard library's distribution implementations.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Random initialisation: matrices uniform in +-sqrt(6 / (fan_in + fan_out)),
/// biases and beta zero, layer-norm gains one. Deterministic per seed.
template <class Real>
ModelParams<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ModelParams<Real> p = make_params<Real>(cfg);
  std::mt19937_64 rng(seed);
  for_each_weight(p.weights, [&](const std::string& name, Tensor<Real>& t) {
    if (t.rank() != 2 || name.find("ln_") != std::string::npos) return;
    const double limit = std::sqrt(6.0 / double(t.shape()[0] + t.shape()[1]));
    for (auto& v : t.data()) v = static_cast<Real>((2.0 * uniform01(rng) - 1.0) * limit);
  });
  return p;
}

/// Model weights recorded on a tape.
template <class Real>
struct BoundModel {
  const ModelConfig* config;
  ModelWeights<Var<Real>> w;
  Tape<Real>* tape;
};

template <class Real>
BoundModel<Real> bind(Tape<Real>& tape, const ModelParams<Real>& p) {
  BoundModel<Real> b{&p.config, {}, &tape};
  const auto& w = p.weights;
  b.w.src_embed = tape.parameter(w.src_embed);
  b.w.tgt_embed = tape.parameter(w.tgt_embed);
  for (std::size_t d = 0; d < 2; ++d)
    for (const auto& u : w.encoder[d]) b.w.encoder[d].push_back(bind(tape, u));
  for (const auto& u : w.decoder) b.w.decoder.push_back(bind(tape, u));
  const auto& a = w.attention;
  b.w.attention = {tape.parameter(a.W_a), tape.parameter(a.U_a), tape.parameter(a.b_a), tape.parameter(a.v_a),
                   tape.parameter(a.beta)};
  const auto& o = w.output;
  b.w.output.U_t = tape.parameter(o.U_t);
  b.w.output.V_t = tape.parameter(o.V_t);
  b.w.output.C_t = tape.parameter(o.C_t);
  b.w.output.b_t = tape.parameter(o.b_t);
  if (!o.W_t.empty()) b.w.output.W_t = tape.parameter(o.W_t);
  return b;
}

/// Gradients of every weight after tape.backward(), in for_each_weight order.
template <class Real>
std::vector<Tensor<Real>> collect_gradients(const BoundModel<Real>& b) {
  std::vector<Tensor<Real>> out;
  for_each_weight(b.w, [&](const std::string&, const Var<Real>& v) { out.push_back(b.tape->gradient(v)); });
  return out;
}

/// Token sequences padded to a common length, laid out position-major:
/// entry (j, b) lives at j * batch + b.
struct PaddedBatch {
  std::size_t length = 0;
  std::size_t batch = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;

  int id(std::size_t j, std::size_t b) const { return ids[j * batch + b]; }

  std::vector<int> column(std::size_t j) const {
    return {ids.begin() + j * batch, ids.begin() + (j + 1) * batch};
  }
  std::vector<std::uint8_t> mask_column(std::size_t j) const {
    return {mask.begin() + j * batch, mask.begin() + (j + 1) * batch};
  }

  static PaddedBatch from(const std::vector<std::vector<int>>& seqs, std::size_t min_length = 0) {
    if (seqs.empty()) throw ArgumentError("cannot pad an empty batch");
    PaddedBatch p;
    p.batch = seqs.size();
    p.length = min_length;
    for (const auto& s : seqs) {
      if (s.empty()) throw ArgumentError("empty sequence in batch");
      p.length = std::max(p.length, s.size());
    }
    p.ids.assign(p.length * p.batch, kEos);
    p.mask.assign(p.length * p.batch, 0);
    for (std::size_t b = 0; b < p.batch; ++b)
      for (std::size_t j = 0; j < seqs[b].size(); ++j) {
        p.ids[j * p.batch + b] = seqs[b][j];
        p.mask[j * p.batch + b] = 1;
      }
    return p;
  }
};

/// Encoder output for a batch: values holds h_j = [fwd_j ; bwd_j] as rows
/// j * batch + b, keys caches U_a h_j + b_a for attention.
template <class Real>
struct Annotation {
  Var<Real> values;
  Var<Real> keys;
  std::vector<std::uint8_t> mask;
  std::size_t length = 0;
  std::size_t batch = 0;
};

/// Recurrent state of the decoder: one entry per stack layer (deep stacked)
/// or a single entry holding the last transition's state (deep transition).
template <class Real>
struct DecoderState {
  std::vector<RnnState<Real>> layers;
};

namespace detail {

// One recurrent layer over the whole sequence; padded positions carry the
// previous state through unchanged.
template <class Real>
std::vector<Var<Real>> run_layer(const UnitVars<Real>& unit, const std::vector<Var<Real>>& inputs,
                                 const PaddedBatch& src, bool reverse, Tape<Real>& tape, std::size_t hidden) {
  const std::size_t m = src.length;
  std::vector<Var<Real>> out(m);
  RnnState<Real> state = zero_state(tape, unit.type, src.batch, hidden);
  for (std::size_t step = 0; step < m; ++step) {
    const std::size_t j = reverse ? m - 1 - step : step;
    RnnState<Real> next = unit_step(unit, std::optional<Var<Real>>(inputs[j]), state);
    state = where_rows(src.mask_column(j), next, state);
    out[j] = state.hidden;
  }
  return out;
}

template <class Real>
std::vector<Var<Real>> encode_direction(const BoundModel<Real>& m, std::size_t dir,
                                        const std::vector<Var<Real>>& embedded, const PaddedBatch& src) {
  const ModelConfig& cfg = *m.config;
  const auto& units = m.w.encoder[dir];
  Tape<Real>& tape = *m.tape;
  if (cfg.arch == Architecture::deep_stacked) {
    std::vector<Var<Real>> below = embedded;
    std::vector<Var<Real>> w;
    for (std::size_t l = 0; l < units.size(); ++l) {
      // Forward encoder: odd layers left-to-right, even right-to-left; the
      // backward encoder is the mirror image.
      const bool reverse = ((l % 2) == 1) != (dir == 1);
      std::vector<Var<Real>> h = run_layer(units[l], below, src, reverse, tape, cfg.hidden);
      if (l == 0) {
        w = h;
      } else {
        for (std::size_t j = 0; j < h.size(); ++j) w[j] = add(h[j], w[j]);
      }
      below = w;
    }
    return w;
  }
  // Deep transition: the first transition reads the token and the state of
  // the previous position's last transition; later transitions get no input.
  const std::size_t len = src.length;
  std::vector<Var<Real>> out(len);
  RnnState<Real> state = zero_state(tape, cfg.unit, src.batch, cfg.hidden);
  for (std::size_t step = 0; step < len; ++step) {
    const std::size_t j = dir == 1 ? len - 1 - step : step;
    RnnState<Real> s = unit_step(units[0], std::optional<Var<Real>>(embedded[j]), state);
    for (std::size_t l = 1; l < units.size(); ++l) s = unit_step(units[l], std::nullopt, s);
    state = where_rows(src.mask_column(j), s, state);
    out[j] = state.hidden;
  }
  return out;
}

}  // namespace detail

/// Bidirectional encoder over a padded batch of source ids.
template <class Real>
Annotation<Real> encode(const BoundModel<Real>& m, const PaddedBatch& src) {
  if (src.length == 0 || src.batch == 0) throw ArgumentError("encode: empty source");
  for (std::size_t b = 0; b < src.batch; ++b)
    if (!src.mask[b]) throw ArgumentError("encode: empty source sentence in batch");
  std::vector<Var<Real>> embedded;
  for (std::size_t j = 0; j < src.length; ++j) embedded.push_back(embedding(m.w.src_embed, src.column(j)));
  auto fwd = detail::encode_direction(m, 0, embedded, src);
  auto bwd = detail::encode_direction(m, 1, embedded, src);
  std::vector<Var<Real>> h;
  for (std::size_t j = 0; j < src.length; ++j) h.push_back(concat(fwd[j], bwd[j]));
  Annotation<Real> ann;
  ann.values = stack_rows(h);
  ann.keys = add_row(matmul(ann.values, m.w.attention.U_a), m.w.attention.b_a);
  ann.mask = src.mask;
  ann.length = src.length;
  ann.batch = src.batch;
  return ann;
}

template <class Real>
struct AttentionResult {
  Var<Real> context;  // [batch x 2H]
  Var<Real> weights;  // [(m*batch) x 1], row j*batch+b
};

/// Additive attention: e_j = v_a^T tanh(W_a s' + U_a h_j + b_a) + beta,
/// alpha = masked softmax over j, context = sum_j alpha_j h_j.
template <class Real>
AttentionResult<Real> attention(const AttentionWeights<Var<Real>>& ap, const Var<Real>& query,
                                const Annotation<Real>& ann) {
  if (query.rows() != ann.batch) throw DimensionError("attention: query batch does not match annotations");
  Var<Real> pre = add_tiled(ann.keys, matmul(query, ap.W_a));
  Var<Real> scores = add_scalar(matmul(tanh(pre), ap.v_a), ap.beta);
  Var<Real> alpha = masked_position_softmax(scores, ann.mask, ann.batch);
  return {weighted_position_sum(alpha, ann.values, ann.batch), alpha};
}

template <class Real>
DecoderState<Real> initial_decoder_state(const BoundModel<Real>& m, std::size_t batch) {
  const ModelConfig& cfg = *m.config;
  const std::size_t n = cfg.arch == Architecture::deep_stacked ? cfg.dec_depth : 1;
  DecoderState<Real> st;
  for (std::size_t i = 0; i < n; ++i) st.layers.push_back(zero_state(*m.tape, cfg.unit, batch, cfg.hidden));
  return st;
}

template <class Real>
struct DecoderStep {
  DecoderState<Real> state;
  Var<Real> logits;   // [batch x target vocab], before the softmax
  Var<Real> weights;  // attention weights
};

/// One decoder time step for a batch of previous tokens.
template <class Real>
DecoderStep<Real> decoder_step(const BoundModel<Real>& m, const std::vector<int>& y_prev,
                               const DecoderState<Real>& st, const Annotation<Real>& ann) {
  const ModelConfig& cfg = *m.config;
  const auto& units = m.w.decoder;
  if (y_prev.size() != ann.batch) throw DimensionError("decoder_step: token batch does not match annotations");
  Var<Real> emb = embedding(m.w.tgt_embed, y_prev);
  DecoderStep<Real> out;
  Var<Real> top;
  AttentionResult<Real> att;
  if (cfg.arch == Architecture::deep_stacked) {
    if (st.layers.size() != cfg.dec_depth) throw DimensionError("decoder_step: state has wrong layer count");
    RnnState<Real> s_prime = unit_step(units[0], std::optional<Var<Real>>(emb), st.layers[0]);
    att = attention(m.w.attention, s_prime.hidden, ann);
    RnnState<Real> s1 = unit_step(units[1], std::optional<Var<Real>>(att.context), s_prime);
    out.state.layers.push_back(s1);
    Var<Real> w = s1.hidden;
    for (std::size_t l = 1; l < cfg.dec_depth; ++l) {
      RnnState<Real> sl = unit_step(units[l + 1], std::optional<Var<Real>>(w), st.layers[l]);
      out.state.layers.push_back(sl);
      w = add(sl.hidden, w);
    }
    top = w;
  } else {
    if (st.layers.size() != 1) throw DimensionError("decoder_step: state has wrong layer count");
    RnnState<Real> s = unit_step(units[0], std::optional<Var<Real>>(emb), st.layers[0]);
    att = attention(m.w.attention, s.hidden, ann);
    s = unit_step(units[1], std::optional<Var<Real>>(att.context), s);
    for (std::size_t l = 2; l < units.size(); ++l) s = unit_step(units[l], std::nullopt, s);
    out.state.layers.push_back(s);
    top = s.hidden;
  }
  const auto& o = m.w.output;
  Var<Real> t = add(add(matmul(top, o.U_t), matmul(emb, o.V_t)), matmul(att.context, o.C_t));
  t = tanh(add_row(t, o.b_t));
  out.logits = cfg.tie_embeddings ? matmul_nt(t, m.w.tgt_embed) : matmul(t, o.W_t);
  out.weights = att.weights;
  return out;
}

/// Row-wise log-softmax of untracked logits.
template <class Real>
Tensor<Real> log_softmax(const Tensor<Real>& logits) {
  Tensor<Real> out = logits;
  detail::log_softmax_rows_inplace(out);
  return out;
}

/// Summed negative log-likelihood of a padded target batch. Targets must
/// end with the end-of-sentence symbol; the decoder input at step 0 is the
/// begin symbol.
template <class Real>
Var<Real> batch_nll(const BoundModel<Real>& m, const PaddedBatch& src, const PaddedBatch& tgt) {
  if (src.batch != tgt.batch) throw DimensionError("batch_nll: source and target batch sizes differ");
  Annotation<Real> ann = encode(m, src);
  DecoderState<Real> st = initial_decoder_state(m, src.batch);
  std::vector<int> prev(src.batch, kBos);
  Var<Real> total;
  for (std::size_t i = 0; i < tgt.length; ++i) {
    DecoderStep<Real> step = decoder_step(m, prev, st, ann);
    Var<Real> nll = softmax_nll(step.logits, tgt.column(i), tgt.mask_column(i));
    total = total.valid() ? add(total, nll) : nll;
    st = std::move(step.state);
    prev = tgt.column(i);
  }
  return total;
}

/// log p(y | x) = sum_i log p(y_i | y_<i, x). y must end with kEos.
template <class Real>
Real sentence_logprob(const ModelParams<Real>& params, const std::vector<int>& x, const std::vector<int>& y) {
  if (x.empty() || y.empty()) throw ArgumentError("sentence_logprob: empty sequence");
  if (y.back() != kEos) throw ArgumentError("sentence_logprob: target must end with the end symbol");
  Tape<Real> tape(false);
  BoundModel<Real> m = bind(tape, params);
  Annotation<Real> ann = encode(m, PaddedBatch::from({x}));
  DecoderState<Real> st = initial_decoder_state(m, 1);
  int prev = kBos;
  Real total = 0;
  for (int token : y) {
    if (token < 0 || static_cast<std::size_t>(token) >= params.config.tgt_vocab)
      throw ArgumentError("sentence_logprob: target id outside vocabulary");
    DecoderStep<Real> step = decoder_step(m, {prev}, st, ann);
    total += log_softmax(step.logits.value())[token];
    st = std::move(step.state);
    prev = token;
  }
  return total;
}

}  // namespace nmt
