#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dabdu/ops.hpp"

namespace dabdu::nn {

struct ConvParams {
  Tensor weight;  // [F, C, kh, kw]
  Tensor bias;    // [F]
};

struct DenseBlockConfig {
  std::size_t num_layers = 2;
  std::size_t growth_rate = 8;
  std::size_t in_channels = 1;

  std::size_t out_channels() const { return in_channels + num_layers * growth_rate; }

  // Input channels seen by composite layer j.
  std::size_t layer_input(std::size_t j) const { return in_channels + j * growth_rate; }

  void validate() const {
    if (num_layers < 1 || growth_rate < 1 || in_channels < 1) {
      throw ConfigError("dense block needs num_layers, growth_rate and in_channels >= 1");
    }
  }
};

struct DenseBlockParams {
  std::vector<ConvParams> layers;  // 3x3 kernels, one per composite layer
};

inline std::size_t dense_block_parameter_count(const DenseBlockConfig& cfg) {
  std::size_t total = 0;
  for (std::size_t j = 0; j < cfg.num_layers; ++j) total += cfg.growth_rate * cfg.layer_input(j) * 9 + cfg.growth_rate;
  return total;
}

/// DenseNet connectivity: layer j sees relu(concat(x, y_0..y_{j-1})) through a
/// padded 3x3 conv and emits growth_rate channels. The result is the concat of
/// the input and every layer output.
inline Tensor dense_block(Tape& tape, const Tensor& x, const DenseBlockConfig& cfg, const DenseBlockParams& params) {
  cfg.validate();
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
    throw ShapeError("dense block expects " + std::to_string(cfg.in_channels) + " input channels, got " +
                     to_string(x.shape()));
  }
  if (params.layers.size() != cfg.num_layers) throw ShapeError("dense block parameter count does not match config");
  std::vector<Tensor> features{x};
  Tensor running = x;
  for (std::size_t j = 0; j < cfg.num_layers; ++j) {
    const auto& layer = params.layers[j];
    const auto& w = layer.weight.shape();
    if (w != Shape{cfg.growth_rate, cfg.layer_input(j), 3, 3}) {
      throw ShapeError("dense layer " + std::to_string(j) + " kernel has shape " + to_string(w));
    }
    Tensor y = conv2d(tape, relu(tape, running), layer.weight, layer.bias, 1, 1);
    features.push_back(y);
    running = concat(tape, features, 1);
  }
  return running;
}

/// 1x1 channel compression followed by 2x2 max pooling.
inline Tensor transition_down(Tape& tape, const Tensor& x, const ConvParams& compress) {
  if (compress.weight.rank() != 4 || compress.weight.dim(2) != 1 || compress.weight.dim(3) != 1) {
    throw ShapeError("transition_down needs a 1x1 kernel, got " + to_string(compress.weight.shape()));
  }
  return maxpool2d(tape, conv2d(tape, x, compress.weight, compress.bias), 2, 2);
}

/// Nearest 2x upsampling followed by a padded 3x3 conv.
inline Tensor transition_up(Tape& tape, const Tensor& x, const ConvParams& conv) {
  if (conv.weight.rank() != 4 || conv.weight.dim(2) != 3 || conv.weight.dim(3) != 3) {
    throw ShapeError("transition_up needs a 3x3 kernel, got " + to_string(conv.weight.shape()));
  }
  return conv2d(tape, upsample2d(tape, x, 2), conv.weight, conv.bias, 1, 1);
}

// ---------------------------------------------------------------------------
// Attention gate

/// Maps are stored input-major so that W_x is F_l x F_a as declared, and are
/// applied per pixel (equivalent to 1x1 convolutions).
struct AttentionGateParams {
  Tensor wx;    // [F_l, F_a]
  Tensor wg;    // [F_g, F_a]
  Tensor bg;    // [F_a]
  Tensor psi;   // [F_a, 1]
  Tensor bpsi;  // [1]

  std::size_t skip_channels() const { return wx.dim(0); }
  std::size_t gate_channels() const { return wg.dim(0); }
  std::size_t inter_channels() const { return wx.dim(1); }

  void validate() const {
    const std::size_t fl = wx.dim(0), fa = wx.dim(1), fg = wg.dim(0);
    if (wx.shape() != Shape{fl, fa} || wg.shape() != Shape{fg, fa} || bg.shape() != Shape{fa} ||
        psi.shape() != Shape{fa, 1} || bpsi.numel() != 1) {
      throw ShapeError("attention gate parameters have inconsistent shapes");
    }
  }
};

inline std::size_t attention_width(std::size_t skip_channels) { return (skip_channels + 1) / 2; }

inline std::size_t attention_gate_parameter_count(std::size_t fl, std::size_t fg, std::size_t fa) {
  return fl * fa + fg * fa + fa + fa + 1;
}

struct GateOutput {
  Tensor gated;  // x * alpha
  Tensor alpha;  // [N,1,H,W]
};

/// alpha = sigmoid(psi^T relu(W_x^T x + W_g^T g + b_g) + b_psi) per pixel; the
/// gated map is x scaled by alpha across all channels. g may sit one level
/// coarser than x, in which case it is nearest-upsampled onto x's grid.
inline GateOutput attention_gate(Tape& tape, const Tensor& x, const Tensor& g, const AttentionGateParams& params) {
  params.validate();
  if (x.rank() != 4 || g.rank() != 4 || x.dim(0) != g.dim(0)) {
    throw ShapeError("attention gate needs [N,C,H,W] inputs with equal batch, got " + to_string(x.shape()) +
                     " and " + to_string(g.shape()));
  }
  if (x.dim(1) != params.skip_channels() || g.dim(1) != params.gate_channels()) {
    throw ShapeError("attention gate channel mismatch: x " + to_string(x.shape()) + ", g " + to_string(g.shape()));
  }
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  Tensor gate = g;
  if (g.dim(2) * 2 == h && g.dim(3) * 2 == w) {
    gate = upsample2d(tape, g, 2);
  } else if (g.dim(2) != h || g.dim(3) != w) {
    throw ShapeError("gating signal " + to_string(g.shape()) + " is neither on nor one level coarser than " +
                     to_string(x.shape()));
  }
  Tensor xr = to_rows(tape, x);
  Tensor gr = to_rows(tape, gate);
  Tensor joint = add(tape, add(tape, matmul(tape, xr, params.wx), matmul(tape, gr, params.wg)), params.bg);
  Tensor q = add(tape, matmul(tape, relu(tape, joint), params.psi), params.bpsi);
  Tensor alpha = from_rows(tape, sigmoid(tape, q), n, h, w);
  return {mul(tape, x, alpha), alpha};
}

}  // namespace dabdu::nn
