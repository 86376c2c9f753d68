#pragma once

// Finite-difference verification of every differentiable operation, the
// building blocks and the assembled model. Shared by `dabdu gradcheck` and
// the acceptance tests.

#include <functional>
#include <string>
#include <vector>

#include "dabdu/gradcheck.hpp"
#include "dabdu/metrics.hpp"
#include "dabdu/model.hpp"

namespace dabdu {

struct GradCheckResult {
  std::string name;
  std::size_t seeds = 0;
  std::size_t coordinates = 0;
  double max_error = 0.0;
  double tolerance = 0.0;

  bool passed() const { return max_error <= tolerance; }
};

inline constexpr double kSmoothTolerance = 1e-6;
inline constexpr double kKinkTolerance = 1e-4;
inline constexpr double kFiniteDifferenceStep = 1e-5;

namespace suite_detail {

struct Case {
  std::string name;
  double tolerance;
  // Builds one randomized check for a seed: a loss over some leaves.
  std::function<GradientComparison(std::uint64_t seed)> run;
};

// Contracts an op output with fixed random weights so every output element
// contributes a distinct cotangent.
inline Tensor probe(Tape& tape, const Tensor& out, const Tensor& weights) { return sum(tape, mul(tape, out, weights)); }

inline Tensor leaf(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
  return random_tensor(rng, std::move(s), lo, hi).set_requires_grad(true);
}

inline nn::LstmParams random_lstm(Rng& rng, std::size_t din, std::size_t dh) {
  auto W = [&] { return leaf(rng, {din, dh}, -0.8, 0.8); };
  auto U = [&] { return leaf(rng, {dh, dh}, -0.8, 0.8); };
  auto b = [&] { return leaf(rng, {dh}, -0.5, 0.5); };
  return {W(), U(), b(), W(), U(), b(), W(), U(), b(), W(), U(), b()};
}

inline std::vector<Tensor> lstm_leaves(const nn::LstmParams& p) {
  return {p.Wi, p.Ui, p.bi, p.Wf, p.Uf, p.bf, p.Wo, p.Uo, p.bo, p.Wc, p.Uc, p.bc};
}

inline nn::FusionParams random_fusion(Rng& rng, std::size_t dh, std::size_t da) {
  return {leaf(rng, {dh, dh}, -0.8, 0.8), leaf(rng, {dh, dh}, -0.8, 0.8), leaf(rng, {dh}, -0.5, 0.5),
          leaf(rng, {da, 1}, -1.0, 1.0), leaf(rng, {2, da}, -1.0, 1.0)};
}

inline std::vector<Case> cases() {
  const double h = kFiniteDifferenceStep;
  std::vector<Case> out;

  out.push_back({"elementwise add/sub/mul/div with broadcasting", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor a = leaf(rng, {2, 3, 2, 2});
                   Tensor same = leaf(rng, {2, 3, 2, 2});
                   Tensor chan = leaf(rng, {3});
                   Tensor single = leaf(rng, {2, 1, 2, 2});
                   Tensor scal = leaf(rng, {1});
                   Tensor denom = leaf(rng, {2, 3, 2, 2}, 0.5, 1.5);
                   Tensor r = random_tensor(rng, {2, 3, 2, 2});
                   return compare_gradients(
                       [=](Tape& t) {
                         Tensor y = mul(t, a, same);
                         y = add(t, y, chan);
                         y = sub(t, y, mul(t, a, single));
                         y = add(t, y, mul(t, a, scal));
                         y = div(t, y, denom);
                         return probe(t, y, r);
                       },
                       {a, same, chan, single, scal, denom}, h);
                 }});

  out.push_back({"sigmoid/tanh/identity activations", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor x = leaf(rng, {3, 4}, -3.0, 3.0);
                   Tensor r = random_tensor(rng, {3, 4});
                   return compare_gradients(
                       [=](Tape& t) {
                         Tensor y = add(t, sigmoid(t, x), tanh(t, x));
                         return probe(t, add(t, y, activate(t, Activation::Identity, x)), r);
                       },
                       {x}, h);
                 }});

  out.push_back({"relu", kKinkTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor x = leaf(rng, {4, 5});
                   Tensor r = random_tensor(rng, {4, 5});
                   return compare_gradients([=](Tape& t) { return probe(t, relu(t, x), r); }, {x}, h);
                 }});

  out.push_back({"matmul", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor a = leaf(rng, {3, 4});
                   Tensor b = leaf(rng, {4, 2});
                   Tensor r = random_tensor(rng, {3, 2});
                   return compare_gradients([=](Tape& t) { return probe(t, matmul(t, a, b), r); }, {a, b}, h);
                 }});

  out.push_back({"conv2d (3x3 pad 1, 3x3 stride 2, 1x1)", kKinkTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor x = leaf(rng, {1, 2, 5, 5});
                   Tensor w3 = leaf(rng, {3, 2, 3, 3});
                   Tensor b3 = leaf(rng, {3});
                   Tensor w1 = leaf(rng, {2, 3, 1, 1});
                   Tensor b1 = leaf(rng, {2});
                   Tensor r1 = random_tensor(rng, {1, 2, 5, 5});
                   Tensor r2 = random_tensor(rng, {1, 3, 2, 2});
                   return compare_gradients(
                       [=](Tape& t) {
                         Tensor y = conv2d(t, conv2d(t, x, w3, b3, 1, 1), w1, b1);
                         Tensor z = conv2d(t, x, w3, b3, 2, 0);
                         return add(t, probe(t, y, r1), probe(t, z, r2));
                       },
                       {x, w3, b3, w1, b1}, h);
                 }});

  out.push_back({"upsample o maxpool", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor x = leaf(rng, {1, 1, 4, 4});
                   Tensor r = random_tensor(rng, {1, 1, 4, 4});
                   return compare_gradients([=](Tape& t) { return probe(t, upsample2d(t, maxpool2d(t, x)), r); }, {x},
                                            h);
                 }});

  out.push_back({"concat/slice/reshape/to_rows/from_rows", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor a = leaf(rng, {1, 2, 3, 2});
                   Tensor b = leaf(rng, {1, 3, 3, 2});
                   Tensor r = random_tensor(rng, {1, 3, 3, 2});
                   return compare_gradients(
                       [=](Tape& t) {
                         Tensor c = concat(t, {a, b}, 1);
                         Tensor rows = to_rows(t, c);
                         Tensor sq = mul(t, rows, rows);
                         Tensor back = from_rows(t, reshape(t, reshape(t, sq, {30}), {6, 5}), 1, 3, 2);
                         return probe(t, slice(t, back, 1, 1, 3), r);
                       },
                       {a, b}, h);
                 }});

  out.push_back({"softmax and axis reductions", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor v = leaf(rng, {5}, -2.0, 2.0);
                   Tensor m = leaf(rng, {3, 4, 2}, -2.0, 2.0);
                   Tensor rv = random_tensor(rng, {5});
                   Tensor rm = random_tensor(rng, {3, 2});
                   return compare_gradients(
                       [=](Tape& t) {
                         Tensor a = probe(t, softmax(t, v, 0), rv);
                         Tensor s = softmax(t, m, 1);
                         Tensor b = probe(t, mul(t, sum(t, mul(t, s, m), 1), mean(t, m, 1)), rm);
                         return add(t, a, add(t, b, mean(t, m)));
                       },
                       {v, m}, h);
                 }});

  out.push_back({"dense_block", kKinkTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   nn::DenseBlockConfig cfg{2, 3, 2};
                   Tensor x = leaf(rng, {1, 2, 5, 5});
                   nn::DenseBlockParams p;
                   std::vector<Tensor> leaves{x};
                   for (std::size_t j = 0; j < cfg.num_layers; ++j) {
                     p.layers.push_back({leaf(rng, {3, cfg.layer_input(j), 3, 3}), leaf(rng, {3})});
                     leaves.push_back(p.layers.back().weight);
                     leaves.push_back(p.layers.back().bias);
                   }
                   Tensor r = random_tensor(rng, {1, cfg.out_channels(), 5, 5});
                   return compare_gradients([=](Tape& t) { return probe(t, nn::dense_block(t, x, cfg, p), r); }, leaves,
                                            h);
                 }});

  out.push_back({"transition_down -> transition_up", kKinkTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor x = leaf(rng, {1, 4, 4, 4});
                   nn::ConvParams down{leaf(rng, {2, 4, 1, 1}), leaf(rng, {2})};
                   nn::ConvParams up{leaf(rng, {4, 2, 3, 3}), leaf(rng, {4})};
                   Tensor r = random_tensor(rng, {1, 4, 4, 4});
                   return compare_gradients(
                       [=](Tape& t) { return probe(t, nn::transition_up(t, nn::transition_down(t, x, down), up), r); },
                       {x, down.weight, down.bias, up.weight, up.bias}, h);
                 }});

  out.push_back({"attention_gate", kKinkTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor x = leaf(rng, {1, 4, 8, 8});
                   Tensor g = leaf(rng, {1, 6, 4, 4});
                   nn::AttentionGateParams p{leaf(rng, {4, 2}), leaf(rng, {6, 2}), leaf(rng, {2}), leaf(rng, {2, 1}),
                                             leaf(rng, {1})};
                   Tensor r = random_tensor(rng, {1, 4, 8, 8});
                   return compare_gradients(
                       [=](Tape& t) {
                         auto out = nn::attention_gate(t, x, g, p);
                         return add(t, probe(t, out.gated, r), sum(t, out.alpha));
                       },
                       {x, g, p.wx, p.wg, p.bg, p.psi, p.bpsi}, h);
                 }});

  out.push_back({"lstm_cell", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   auto p = random_lstm(rng, 3, 4);
                   Tensor x = leaf(rng, {1, 3});
                   Tensor h0 = leaf(rng, {1, 4});
                   Tensor c0 = leaf(rng, {1, 4});
                   Tensor rh = random_tensor(rng, {1, 4});
                   Tensor rc = random_tensor(rng, {1, 4});
                   auto leaves = lstm_leaves(p);
                   leaves.insert(leaves.end(), {x, h0, c0});
                   return compare_gradients(
                       [=](Tape& t) {
                         auto s = nn::lstm_cell(t, x, nn::LstmState{h0, c0}, p);
                         return add(t, probe(t, s.h, rh), probe(t, s.c, rc));
                       },
                       leaves, h);
                 }});

  out.push_back({"bidirectional_pass", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   auto fwd = random_lstm(rng, 3, 4);
                   auto bwd = random_lstm(rng, 3, 4);
                   Tensor x1 = leaf(rng, {2, 3});
                   Tensor x2 = leaf(rng, {2, 3});
                   std::vector<Tensor> r;
                   for (int k = 0; k < 4; ++k) r.push_back(random_tensor(rng, {2, 4}));
                   auto leaves = lstm_leaves(fwd);
                   const auto lb = lstm_leaves(bwd);
                   leaves.insert(leaves.end(), lb.begin(), lb.end());
                   leaves.insert(leaves.end(), {x1, x2});
                   return compare_gradients(
                       [=](Tape& t) {
                         auto o = nn::bidirectional_pass(t, {x1, x2}, fwd, bwd);
                         Tensor a = add(t, probe(t, o.forward[0], r[0]), probe(t, o.forward[1], r[1]));
                         Tensor b = add(t, probe(t, o.backward[0], r[2]), probe(t, o.backward[1], r[3]));
                         return add(t, a, b);
                       },
                       leaves, h);
                 }});

  out.push_back({"combine_y", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   auto p = random_fusion(rng, 4, 3);
                   Tensor hf = leaf(rng, {2, 4});
                   Tensor hb = leaf(rng, {2, 4});
                   Tensor r = random_tensor(rng, {2, 4});
                   return compare_gradients([=](Tape& t) { return probe(t, nn::combine_y(t, hf, hb, p), r); },
                                            {hf, hb, p.Wyf, p.Wyb, p.by}, h);
                 }});

  out.push_back({"channel_attention", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   auto p = random_fusion(rng, 4, 3);
                   Tensor y1 = leaf(rng, {2, 4}, 0.05, 0.95);
                   Tensor y2 = leaf(rng, {2, 4}, 0.05, 0.95);
                   Tensor r = random_tensor(rng, {2, 4});
                   Tensor rb = random_tensor(rng, {2, 2, 4});
                   return compare_gradients(
                       [=](Tape& t) {
                         auto o = nn::channel_attention(t, {y1, y2}, p);
                         return add(t, probe(t, o.fused, r), probe(t, o.beta, rb));
                       },
                       {y1, y2, p.va, p.Wa}, h);
                 }});

  out.push_back({"fuse_skip", kKinkTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   nn::SkipFusionParams p{random_lstm(rng, 4, 4), random_lstm(rng, 4, 4), random_fusion(rng, 4, 3)};
                   Tensor enc = leaf(rng, {1, 4, 4, 4});
                   Tensor up = leaf(rng, {1, 4, 4, 4});
                   Tensor r = random_tensor(rng, {1, 4, 4, 4});
                   auto leaves = lstm_leaves(p.forward);
                   const auto lb = lstm_leaves(p.backward);
                   leaves.insert(leaves.end(), lb.begin(), lb.end());
                   leaves.insert(leaves.end(), {p.fusion.Wyf, p.fusion.Wyb, p.fusion.by, p.fusion.va, p.fusion.Wa, enc, up});
                   return compare_gradients([=](Tape& t) { return probe(t, nn::fuse_skip(t, enc, up, p).fused, r); },
                                            leaves, h);
                 }});

  out.push_back({"soft_dice_loss", kSmoothTolerance, [h](std::uint64_t seed) {
                   Rng rng(seed);
                   Tensor p = leaf(rng, {1, 1, 8, 8}, 0.01, 0.99);
                   std::vector<double> y(64);
                   for (auto& v : y) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
                   Tensor mask({1, 1, 8, 8}, y);
                   return compare_gradients([=](Tape& t) { return soft_dice_loss(t, p, mask); }, {p}, h);
                 }});

  out.push_back({"full model (DA-BDense-UNet, 16x16, 30 sampled parameters)", kKinkTolerance,
                 [h](std::uint64_t seed) {
                   ModelConfig cfg;
                   cfg.height = cfg.width = 16;
                   cfg.seed = seed;
                   Model model(cfg);
                   Rng rng(derive_seed(seed, 99));
                   Tensor x = random_tensor(rng, {1, 1, 16, 16}, 0.0, 1.0);
                   std::vector<double> y(256);
                   for (auto& v : y) v = rng.uniform() < 0.2 ? 1.0 : 0.0;
                   Tensor mask({1, 1, 16, 16}, y);
                   std::vector<Tensor> leaves;
                   for (const auto& e : model.parameters().entries()) leaves.push_back(e.tensor);
                   return compare_gradients(
                       [&model, x, mask](Tape& t) { return soft_dice_loss(t, model.forward(t, x).prob, mask); }, leaves,
                       h, 30, derive_seed(seed, 7));
                 }});
  return out;
}

}  // namespace suite_detail

/// Runs every case for `seeds` consecutive seeds starting at `base_seed`.
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t base_seed, std::size_t seeds = 5) {
  std::vector<GradCheckResult> results;
  for (const auto& c : suite_detail::cases()) {
    GradCheckResult r{c.name, seeds, 0, 0.0, c.tolerance};
    for (std::size_t s = 0; s < seeds; ++s) {
      const auto cmp = c.run(derive_seed(base_seed, s));
      r.coordinates += cmp.coordinates;
      r.max_error = std::max(r.max_error, cmp.max_error);
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace dabdu
