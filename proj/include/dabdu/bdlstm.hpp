#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dabdu/ops.hpp"

namespace dabdu::nn {

// Cell-output nonlinearity applied to c_t before the output gate.
enum class CellOutput { Identity, Tanh };

/// One LSTM direction. Maps are input-major: rows = x (or h) features,
/// columns = hidden units, so a batch of row vectors multiplies on the left.
struct LstmParams {
  Tensor Wi, Ui, bi;  // input gate
  Tensor Wf, Uf, bf;  // forget gate
  Tensor Wo, Uo, bo;  // output gate
  Tensor Wc, Uc, bc;  // candidate

  std::size_t input_size() const { return Wi.dim(0); }
  std::size_t hidden_size() const { return Wi.dim(1); }

  void validate() const {
    const std::size_t din = input_size(), dh = hidden_size();
    for (const Tensor* w : {&Wi, &Wf, &Wo, &Wc}) {
      if (w->shape() != Shape{din, dh}) throw ShapeError("LSTM input maps must all be " + to_string({din, dh}));
    }
    for (const Tensor* u : {&Ui, &Uf, &Uo, &Uc}) {
      if (u->shape() != Shape{dh, dh}) throw ShapeError("LSTM recurrent maps must all be " + to_string({dh, dh}));
    }
    for (const Tensor* b : {&bi, &bf, &bo, &bc}) {
      if (b->shape() != Shape{dh}) throw ShapeError("LSTM biases must all be " + to_string({dh}));
    }
  }
};

inline std::size_t lstm_parameter_count(std::size_t din, std::size_t dh) { return 4 * (din * dh + dh * dh + dh); }

struct LstmState {
  Tensor h;  // [P, D_h]
  Tensor c;  // [P, D_h]
};

struct LstmStep {
  Tensor h, c;
  Tensor input_gate, forget_gate, output_gate;
};

namespace detail {

// z + b over [P, 4D]: sigmoid on the i, f, o blocks, tanh on the candidate.
inline Tensor gate_activations(Tape& tape, const Tensor& z, const Tensor& b, std::size_t dh) {
  const std::size_t rows = z.dim(0), width = 4 * dh;
  const auto zv = z.values(), bv = b.values();
  std::vector<double> out(rows * width);
  std::vector<double> cand(rows * dh);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < 3 * dh; ++k) out[r * width + k] = zv[r * width + k] + bv[k];
    for (std::size_t k = 0; k < dh; ++k) cand[r * dh + k] = zv[r * width + 3 * dh + k] + bv[3 * dh + k];
  }
  dabdu::detail::sigmoid_inplace(out);
  dabdu::detail::tanh_inplace(cand);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(cand.data() + r * dh, dh, out.data() + r * width + 3 * dh);
  }
  std::vector<double> y = out;
  return tape.emit(z.shape(), std::move(out), {z, b}, [z, b, dh, rows, width, y = std::move(y)](std::span<const double> g) {
    std::vector<double> dpre(g.size());
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r * width;
      for (std::size_t k = 0; k < 3 * dh; ++k) dpre[base + k] = g[base + k] * y[base + k] * (1.0 - y[base + k]);
      for (std::size_t k = 3 * dh; k < width; ++k) dpre[base + k] = g[base + k] * (1.0 - y[base + k] * y[base + k]);
    }
    if (auto dz = grad_sink(z); !dz.empty()) {
      for (std::size_t i = 0; i < dpre.size(); ++i) dz[i] += dpre[i];
    }
    if (auto db = grad_sink(b); !db.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t k = 0; k < width; ++k) db[k] += dpre[r * width + k];
      }
    }
  });
}

// c = f * c_prev + i * candidate. An undefined c_prev is the zero state.
inline Tensor cell_update(Tape& tape, const Tensor& gates, const Tensor& c_prev, std::size_t dh) {
  const std::size_t rows = gates.dim(0), width = 4 * dh;
  const bool has_prev = c_prev.defined();
  const auto gv = gates.values();
  std::vector<double> out(rows * dh);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* gr = gv.data() + r * width;
    for (std::size_t k = 0; k < dh; ++k) {
      double c = gr[k] * gr[3 * dh + k];
      if (has_prev) c += gr[dh + k] * c_prev.values()[r * dh + k];
      out[r * dh + k] = c;
    }
  }
  std::vector<Tensor> inputs{gates};
  if (has_prev) inputs.push_back(c_prev);
  return tape.emit({rows, dh}, std::move(out), inputs, [gates, c_prev, has_prev, rows, dh, width](std::span<const double> g) {
    const auto gv = gates.values();
    if (auto dg = grad_sink(gates); !dg.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = gv.data() + r * width;
        double* dr = dg.data() + r * width;
        for (std::size_t k = 0; k < dh; ++k) {
          const double gc = g[r * dh + k];
          dr[k] += gc * gr[3 * dh + k];
          dr[3 * dh + k] += gc * gr[k];
          if (has_prev) dr[dh + k] += gc * c_prev.values()[r * dh + k];
        }
      }
    }
    if (has_prev) {
      if (auto dc = grad_sink(c_prev); !dc.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < dh; ++k) dc[r * dh + k] += g[r * dh + k] * gv[r * width + dh + k];
        }
      }
    }
  });
}

// h = o * act(c).
inline Tensor hidden_output(Tape& tape, const Tensor& gates, const Tensor& c, CellOutput cell_output) {
  const std::size_t rows = c.dim(0), dh = c.dim(1), width = 4 * dh;
  const bool squash = cell_output == CellOutput::Tanh;
  const auto gv = gates.values();
  const auto cv = c.values();
  std::vector<double> out(rows * dh);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < dh; ++k) {
      const double a = squash ? std::tanh(cv[r * dh + k]) : cv[r * dh + k];
      out[r * dh + k] = gv[r * width + 2 * dh + k] * a;
    }
  }
  return tape.emit({rows, dh}, std::move(out), {gates, c}, [gates, c, squash, rows, dh, width](std::span<const double> g) {
    const auto gv = gates.values();
    const auto cv = c.values();
    auto dg = grad_sink(gates);
    auto dc = grad_sink(c);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < dh; ++k) {
        const std::size_t i = r * dh + k;
        const double a = squash ? std::tanh(cv[i]) : cv[i];
        const double o = gv[r * width + 2 * dh + k];
        if (!dg.empty()) dg[r * width + 2 * dh + k] += g[i] * a;
        if (!dc.empty()) dc[i] += g[i] * o * (squash ? 1.0 - a * a : 1.0);
      }
    }
  });
}

// beta[2, P, D] from the attention scores of each cell, see channel_attention.
inline Tensor attention_weights(Tape& tape, const Tensor& y0, const Tensor& y1, const Tensor& Wa, const Tensor& va) {
  const std::size_t cells = y0.numel(), da = Wa.dim(1);
  const auto v0 = y0.values(), v1 = y1.values(), wa = Wa.values(), vv = va.values();
  // act[(cell * 2 + i) * da + k] = sigmoid(Wa[0,k] s + Wa[1,k] y_i)
  auto act = std::make_shared<std::vector<double>>(cells * 2 * da);
  for (std::size_t c = 0; c < cells; ++c) {
    const double s = 0.5 * (v0[c] + v1[c]);
    for (std::size_t i = 0; i < 2; ++i) {
      const double y = i == 0 ? v0[c] : v1[c];
      double* a = act->data() + (c * 2 + i) * da;
      for (std::size_t k = 0; k < da; ++k) a[k] = wa[k] * s + wa[da + k] * y;
    }
  }
  dabdu::detail::sigmoid_inplace(*act);
  // softmax over two scores: beta_1 = sigmoid(e_1 - e_2).
  std::vector<double> out(2 * cells);
  for (std::size_t c = 0; c < cells; ++c) {
    const double* a0 = act->data() + c * 2 * da;
    const double* a1 = a0 + da;
    double diff = 0.0;
    for (std::size_t k = 0; k < da; ++k) diff += vv[k] * (a0[k] - a1[k]);
    out[c] = diff;
  }
  dabdu::detail::sigmoid_inplace(std::span<double>(out.data(), cells));
  for (std::size_t c = 0; c < cells; ++c) out[cells + c] = 1.0 - out[c];
  std::vector<double> beta = out;
  return tape.emit({2, y0.dim(0), y0.dim(1)}, std::move(out), {y0, y1, Wa, va},
                   [y0, y1, Wa, va, act, cells, da, beta = std::move(beta)](std::span<const double> g) {
                     const auto v0 = y0.values(), v1 = y1.values(), wa = Wa.values(), vv = va.values();
                     auto d0 = grad_sink(y0), d1 = grad_sink(y1), dwa = grad_sink(Wa), dva = grad_sink(va);
                     std::vector<double> gwa(2 * da, 0.0), gva(da, 0.0);
                     for (std::size_t c = 0; c < cells; ++c) {
                       const double b0 = beta[c], b1 = beta[cells + c];
                       const double mean_g = b0 * g[c] + b1 * g[cells + c];
                       const double ge[2] = {b0 * (g[c] - mean_g), b1 * (g[cells + c] - mean_g)};
                       const double s = 0.5 * (v0[c] + v1[c]);
                       double gs = 0.0, gy[2] = {0.0, 0.0};
                       for (std::size_t i = 0; i < 2; ++i) {
                         const double y = i == 0 ? v0[c] : v1[c];
                         const double* a = act->data() + (c * 2 + i) * da;
                         for (std::size_t k = 0; k < da; ++k) {
                           gva[k] += ge[i] * a[k];
                           const double gz = ge[i] * vv[k] * a[k] * (1.0 - a[k]);
                           gwa[k] += gz * s;
                           gwa[da + k] += gz * y;
                           gs += gz * wa[k];
                           gy[i] += gz * wa[da + k];
                         }
                       }
                       if (!d0.empty()) d0[c] += gy[0] + 0.5 * gs;
                       if (!d1.empty()) d1[c] += gy[1] + 0.5 * gs;
                     }
                     if (!dwa.empty()) for (std::size_t k = 0; k < 2 * da; ++k) dwa[k] += gwa[k];
                     if (!dva.empty()) for (std::size_t k = 0; k < da; ++k) dva[k] += gva[k];
                   });
}

}  // namespace detail

/// One step on a batch of row vectors x: [P, D_in]. A missing `prev` is the
/// zero state; the recurrent terms then vanish and are skipped.
///
/// The published gate equations pair i_t with (W_f, U_f, b_f) and f_t with
/// (W_i, U_i, b_i). That is a pure relabelling, so the conventional pairing
/// is used here.
inline LstmStep lstm_cell(Tape& tape, const Tensor& x, const std::optional<LstmState>& prev, const LstmParams& p,
                          CellOutput cell_output = CellOutput::Identity) {
  p.validate();
  if (x.rank() != 2 || x.dim(1) != p.input_size()) {
    throw ShapeError("lstm_cell input " + to_string(x.shape()) + " does not have " +
                     std::to_string(p.input_size()) + " features");
  }
  if (prev && (prev->h.shape() != Shape{x.dim(0), p.hidden_size()} || prev->c.shape() != prev->h.shape())) {
    throw ShapeError("lstm_cell state shape does not match [" + std::to_string(x.dim(0)) + "," +
                     std::to_string(p.hidden_size()) + "]");
  }
  const std::size_t dh = p.hidden_size();
  // All four gates in one product: columns are [i | f | o | candidate].
  Tensor z = matmul(tape, x, concat(tape, {p.Wi, p.Wf, p.Wo, p.Wc}, 1));
  if (prev) z = add(tape, z, matmul(tape, prev->h, concat(tape, {p.Ui, p.Uf, p.Uo, p.Uc}, 1)));
  Tensor gates = detail::gate_activations(tape, z, concat(tape, {p.bi, p.bf, p.bo, p.bc}, 0), dh);
  Tensor c = detail::cell_update(tape, gates, prev ? prev->c : Tensor{}, dh);
  Tensor h = detail::hidden_output(tape, gates, c, cell_output);
  return {h, c, slice(tape, gates, 1, 0, dh), slice(tape, gates, 1, dh, dh), slice(tape, gates, 1, 2 * dh, dh)};
}

struct BidirectionalOutput {
  std::vector<Tensor> forward;   // forward[t]: hidden state after reading x_1..x_t
  std::vector<Tensor> backward;  // backward[t]: hidden state after reading x_n..x_t
};

/// Both directions start from the zero state; outputs are aligned so index t
/// refers to timestep t in both directions.
inline BidirectionalOutput bidirectional_pass(Tape& tape, const std::vector<Tensor>& seq, const LstmParams& fwd,
                                              const LstmParams& bwd, CellOutput cell_output = CellOutput::Identity) {
  if (seq.empty()) throw ContractError("bidirectional_pass needs a non-empty sequence");
  const std::size_t n = seq.size();
  BidirectionalOutput out{std::vector<Tensor>(n), std::vector<Tensor>(n)};
  std::optional<LstmState> state;
  for (std::size_t t = 0; t < n; ++t) {
    auto step = lstm_cell(tape, seq[t], state, fwd, cell_output);
    out.forward[t] = step.h;
    state = LstmState{step.h, step.c};
  }
  state.reset();
  for (std::size_t t = n; t-- > 0;) {
    auto step = lstm_cell(tape, seq[t], state, bwd, cell_output);
    out.backward[t] = step.h;
    state = LstmState{step.h, step.c};
  }
  return out;
}

/// Output combination and channel-attention parameters.
struct FusionParams {
  Tensor Wyf;  // [D_h, D_out]
  Tensor Wyb;  // [D_h, D_out]
  Tensor by;   // [D_out]
  Tensor va;   // [D_a, 1]; undefined when attention is disabled
  Tensor Wa;   // [2, D_a]: shared over channels, input is (s_c, H_i,c)

  bool has_attention() const { return va.defined() && Wa.defined(); }
};

/// Y_t = sigmoid(h_fwd W_yf + h_bwd W_yb + b_y).
inline Tensor combine_y(Tape& tape, const Tensor& h_fwd, const Tensor& h_bwd, const FusionParams& p) {
  if (h_fwd.rank() != 2 || h_fwd.shape() != h_bwd.shape()) {
    throw ShapeError("combine_y needs matching [P,D_h] states, got " + to_string(h_fwd.shape()) + " and " +
                     to_string(h_bwd.shape()));
  }
  if (p.Wyf.rank() != 2 || p.Wyf.shape() != p.Wyb.shape() || p.Wyf.dim(0) != h_fwd.dim(1) ||
      p.by.shape() != Shape{p.Wyf.dim(1)}) {
    throw ShapeError("combine_y parameter shapes do not match hidden size " + std::to_string(h_fwd.dim(1)));
  }
  return sigmoid(tape, add(tape, add(tape, matmul(tape, h_fwd, p.Wyf), matmul(tape, h_bwd, p.Wyb)), p.by));
}

struct AttentionOutput {
  Tensor fused;  // [P, D]
  Tensor beta;   // [2, P, D]; beta[i] weights Y_i
};

inline std::size_t fusion_parameter_count(std::size_t dh, std::size_t dout, std::size_t da, bool attention) {
  return 2 * dh * dout + dout + (attention ? da + 2 * da : 0);
}

/// Channel-resolved softmax attention over the two combined states. With
/// s = (Y_1 + Y_2)/2, each channel c of step i scores
///   e_{i,c} = v_a^T sigmoid(W_a^T [s_c, Y_{i,c}])
/// and beta_{.,c} = softmax(e_{1,c}, e_{2,c}).
inline AttentionOutput channel_attention(Tape& tape, const std::vector<Tensor>& Y, const FusionParams& p) {
  if (Y.size() != 2) throw ContractError("channel_attention needs exactly two states, got " + std::to_string(Y.size()));
  if (!p.has_attention()) throw ContractError("channel_attention called without attention parameters");
  if (Y[0].rank() != 2 || Y[0].shape() != Y[1].shape()) {
    throw ShapeError("channel_attention states must share a [P,D] shape");
  }
  const std::size_t da = p.Wa.dim(1);
  if (p.Wa.shape() != Shape{2, da} || p.va.shape() != Shape{da, 1}) {
    throw ShapeError("channel_attention expects W_a [2,D_a] and v_a [D_a,1]");
  }
  const std::size_t rows = Y[0].dim(0), d = Y[0].dim(1);
  Tensor beta = detail::attention_weights(tape, Y[0], Y[1], p.Wa, p.va);
  Tensor b0 = reshape(tape, slice(tape, beta, 0, 0, 1), {rows, d});
  Tensor b1 = reshape(tape, slice(tape, beta, 0, 1, 1), {rows, d});
  return {add(tape, mul(tape, b0, Y[0]), mul(tape, b1, Y[1])), beta};
}

struct SkipFusionParams {
  LstmParams forward;
  LstmParams backward;
  FusionParams fusion;
};

struct FusionOutput {
  Tensor fused;  // [N, C, H, W]
  Tensor beta;   // [2, N*H*W, C] when attention ran, else undefined
};

/// Per-pixel BD-LSTM fusion of an encoder skip with the decoder's up-sampled
/// map: the two C-vectors at each location form the sequence (encoded,
/// up-sampled); weights are shared over all locations. Without attention
/// parameters (or with `uniform_beta`) the output is the mean of Y_1 and Y_2.
inline FusionOutput fuse_skip(Tape& tape, const Tensor& encoded, const Tensor& upsampled, const SkipFusionParams& p,
                              CellOutput cell_output = CellOutput::Identity, bool uniform_beta = false) {
  if (encoded.rank() != 4 || encoded.shape() != upsampled.shape()) {
    throw ShapeError("fuse_skip inputs must share a [N,C,H,W] shape, got " + to_string(encoded.shape()) + " and " +
                     to_string(upsampled.shape()));
  }
  const std::size_t n = encoded.dim(0), h = encoded.dim(2), w = encoded.dim(3);
  if (p.forward.input_size() != encoded.dim(1)) {
    throw ShapeError("fuse_skip LSTM input size " + std::to_string(p.forward.input_size()) + " != channels " +
                     std::to_string(encoded.dim(1)));
  }
  const std::vector<Tensor> seq{to_rows(tape, encoded), to_rows(tape, upsampled)};
  auto states = bidirectional_pass(tape, seq, p.forward, p.backward, cell_output);
  std::vector<Tensor> Y;
  for (std::size_t t = 0; t < seq.size(); ++t) Y.push_back(combine_y(tape, states.forward[t], states.backward[t], p.fusion));
  if (!p.fusion.has_attention() || uniform_beta) {
    return {from_rows(tape, scale(tape, add(tape, Y[0], Y[1]), 0.5), n, h, w), Tensor{}};
  }
  auto att = channel_attention(tape, Y, p.fusion);
  return {from_rows(tape, att.fused, n, h, w), att.beta};
}

}  // namespace dabdu::nn
