#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "nmtkit/autodiff.hpp"

namespace nmt {

enum class UnitType { gru, lstm };

inline const char* to_string(UnitType t) { return t == UnitType::gru ? "gru" : "lstm"; }

/// Number of pre-activations a unit computes: GRU has update, reset and
/// candidate; LSTM has input, forget, cell candidate and output.
constexpr std::size_t gate_count(UnitType t) { return t == UnitType::gru ? 3 : 4; }

/// Gate name suffixes in storage order.
inline const std::vector<std::string>& gate_names(UnitType t) {
  static const std::vector<std::string> gru{"z", "r", "h"};
  static const std::vector<std::string> lstm{"i", "f", "c", "o"};
  return t == UnitType::gru ? gru : lstm;
}

namespace gate {
// GRU
inline constexpr std::size_t update = 0, reset = 1, candidate = 2;
// LSTM
inline constexpr std::size_t input = 0, forget = 1, cell = 2, output = 3;
}  // namespace gate

/// Hidden state of one recurrent unit; the cell is present iff the unit is
/// an LSTM. Only the hidden part is exposed to attention, residual sums and
/// the output layer.
template <class Real>
struct RnnState {
  Var<Real> hidden;
  std::optional<Var<Real>> cell;
};

/// Weights of one GRU or LSTM unit, one W/U/b triple per gate.
///
/// W[k] maps the input (input_dim x hidden), U[k] the previous hidden state
/// (hidden x hidden). A unit with input_dim == 0 receives the zero vector as
/// input, so its W terms vanish and are not stored. With layer
/// normalisation, each pre-activation W x + U h + b is normalised with its
/// own gain/bias pair.
template <class T>
struct UnitWeights {
  UnitType type = UnitType::gru;
  std::vector<T> W, U, b, ln_gain, ln_bias;

  std::size_t gates() const { return gate_count(type); }
  bool has_input() const { return !W.empty(); }
  bool layer_norm() const { return !ln_gain.empty(); }
};

template <class Real>
using UnitParams = UnitWeights<Tensor<Real>>;
template <class Real>
using GruParams = UnitWeights<Tensor<Real>>;
template <class Real>
using LstmParams = UnitWeights<Tensor<Real>>;
template <class Real>
using UnitVars = UnitWeights<Var<Real>>;

namespace detail {

template <class Real>
Var<Real> pre_activation(const UnitVars<Real>& p, std::size_t k, const std::optional<Var<Real>>& input,
                         const Var<Real>& recurrent) {
  Var<Real> a = matmul(recurrent, p.U[k]);
  if (input) a = add(matmul(*input, p.W[k]), a);
  a = add_row(a, p.b[k]);
  if (p.layer_norm()) a = layer_norm(a, p.ln_gain[k], p.ln_bias[k], Real(1e-5));
  return a;
}

template <class Real>
void check_step_dims(const char* name, const UnitVars<Real>& p, const std::optional<Var<Real>>& input,
                     const RnnState<Real>& s) {
  const std::size_t hidden = p.U[0].rows();
  if (s.hidden.cols() != hidden)
    throw DimensionError(std::string(name) + ": state width " + std::to_string(s.hidden.cols()) +
                         " does not match hidden size " + std::to_string(hidden));
  if (input.has_value() != p.has_input())
    throw DimensionError(std::string(name) + ": unit " + (p.has_input() ? "expects" : "takes no") + " input");
  if (input && input->cols() != p.W[0].rows())
    throw DimensionError(std::string(name) + ": input width " + std::to_string(input->cols()) +
                         " does not match " + std::to_string(p.W[0].rows()));
  if (input && input->rows() != s.hidden.rows())
    throw DimensionError(std::string(name) + ": input and state batch sizes differ");
}

}  // namespace detail

/// GRU transition:
///   z = sig(W_z x + U_z h + b_z),  r = sig(W_r x + U_r h + b_r)
///   c = tanh(W x + U (r o h) + b),  h' = (1 - z) o h + z o c
template <class Real>
RnnState<Real> gru_step(const UnitVars<Real>& p, const std::optional<std::type_identity_t<Var<Real>>>& input,
                        const std::type_identity_t<RnnState<Real>>& state) {
  if (p.type != UnitType::gru) throw ArgumentError("gru_step: parameters belong to an LSTM");
  if (state.cell) throw ArgumentError("gru_step: GRU state must not carry a cell");
  detail::check_step_dims("gru_step", p, input, state);
  const Var<Real>& h = state.hidden;
  Var<Real> z = sigmoid(detail::pre_activation(p, gate::update, input, h));
  Var<Real> r = sigmoid(detail::pre_activation(p, gate::reset, input, h));
  Var<Real> c = tanh(detail::pre_activation(p, gate::candidate, input, mul(r, h)));
  return {add(h, mul(z, sub(c, h))), std::nullopt};
}

/// LSTM transition:
///   i, f, o = sig(W x + U h + b) per gate
///   m' = f o m + i o tanh(W_c x + U_c h + b_c),  h' = o o tanh(m')
template <class Real>
RnnState<Real> lstm_step(const UnitVars<Real>& p, const std::optional<std::type_identity_t<Var<Real>>>& input,
                         const std::type_identity_t<RnnState<Real>>& state) {
  if (p.type != UnitType::lstm) throw ArgumentError("lstm_step: parameters belong to a GRU");
  if (!state.cell) throw ArgumentError("lstm_step: LSTM state is missing its memory cell");
  detail::check_step_dims("lstm_step", p, input, state);
  const Var<Real>& h = state.hidden;
  Var<Real> i = sigmoid(detail::pre_activation(p, gate::input, input, h));
  Var<Real> f = sigmoid(detail::pre_activation(p, gate::forget, input, h));
  Var<Real> cand = tanh(detail::pre_activation(p, gate::cell, input, h));
  Var<Real> o = sigmoid(detail::pre_activation(p, gate::output, input, h));
  Var<Real> cell = add(mul(f, *state.cell), mul(i, cand));
  return {mul(o, tanh(cell)), cell};
}

template <class Real>
RnnState<Real> unit_step(const UnitVars<Real>& p, const std::optional<std::type_identity_t<Var<Real>>>& input,
                         const std::type_identity_t<RnnState<Real>>& state) {
  return p.type == UnitType::gru ? gru_step(p, input, state) : lstm_step(p, input, state);
}

/// All-zero state for a batch of `batch` rows.
template <class Real>
RnnState<Real> zero_state(Tape<Real>& tape, UnitType type, std::size_t batch, std::size_t hidden) {
  RnnState<Real> s{tape.constant(Tensor<Real>(Shape{batch, hidden})), std::nullopt};
  if (type == UnitType::lstm) s.cell = tape.constant(Tensor<Real>(Shape{batch, hidden}));
  return s;
}

/// Keeps rows of `next` where keep[r] is set and rows of `prev` elsewhere.
template <class Real>
RnnState<Real> where_rows(const std::vector<std::uint8_t>& keep, const RnnState<Real>& next,
                          const RnnState<Real>& prev) {
  RnnState<Real> out{where_rows(keep, next.hidden, prev.hidden), std::nullopt};
  if (next.cell) out.cell = where_rows(keep, *next.cell, *prev.cell);
  return out;
}

/// Places every tensor of a unit on the tape.
template <class Real>
UnitVars<Real> bind(Tape<Real>& tape, const UnitParams<Real>& p) {
  auto put = [&](const std::vector<Tensor<Real>>& src) {
    std::vector<Var<Real>> out;
    for (const auto& t : src) out.push_back(tape.parameter(t));
    return out;
  };
  return {p.type, put(p.W), put(p.U), put(p.b), put(p.ln_gain), put(p.ln_bias)};
}

/// Zero-filled unit with the given dimensions.
template <class Real>
UnitParams<Real> make_unit(UnitType type, std::size_t input_dim, std::size_t hidden, bool layer_norm) {
  UnitParams<Real> p;
  p.type = type;
  for (std::size_t k = 0; k < gate_count(type); ++k) {
    if (input_dim > 0) p.W.emplace_back(Shape{input_dim, hidden});
    p.U.emplace_back(Shape{hidden, hidden});
    p.b.emplace_back(Shape{hidden});
    if (layer_norm) {
      p.ln_gain.emplace_back(Shape{hidden}, Real(1));
      p.ln_bias.emplace_back(Shape{hidden});
    }
  }
  return p;
}

}  // namespace nmt
