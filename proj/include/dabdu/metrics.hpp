#pragma once

#include <cstddef>

#include "dabdu/ops.hpp"

namespace dabdu {

struct DiceResult {
  std::size_t intersection = 0;
  std::size_t size_pred = 0;
  std::size_t size_true = 0;
  double dc = 0.0;
};

/// DC = 2|Y ∩ Y'| / (|Y| + |Y'|) over binary masks; two empty masks agree
/// perfectly and score 1.
inline DiceResult dice_coefficient(const Tensor& pred, const Tensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("dice masks differ in shape: " + to_string(pred.shape()) + " vs " + to_string(truth.shape()));
  }
  const auto p = pred.values();
  const auto t = truth.values();
  DiceResult r;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if ((p[i] != 0.0 && p[i] != 1.0) || (t[i] != 0.0 && t[i] != 1.0)) {
      throw ContractError("dice_coefficient needs binary masks");
    }
    const bool a = p[i] == 1.0, b = t[i] == 1.0;
    r.size_pred += a;
    r.size_true += b;
    r.intersection += a && b;
  }
  const std::size_t denom = r.size_pred + r.size_true;
  r.dc = denom == 0 ? 1.0 : 2.0 * static_cast<double>(r.intersection) / static_cast<double>(denom);
  return r;
}

inline Tensor binarize(const Tensor& prob, double threshold = 0.5) {
  std::vector<double> out(prob.numel());
  const auto v = prob.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] >= threshold ? 1.0 : 0.0;
  return Tensor(prob.shape(), std::move(out));
}

inline constexpr double kSoftDiceSmoothing = 1.0;

/// 1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps).
inline Tensor soft_dice_loss(Tape& tape, const Tensor& prob, const Tensor& truth, double eps = kSoftDiceSmoothing) {
  if (prob.shape() != truth.shape()) {
    throw ShapeError("soft dice operands differ in shape: " + to_string(prob.shape()) + " vs " +
                     to_string(truth.shape()));
  }
  Tensor overlap = add_scalar(tape, scale(tape, sum(tape, mul(tape, prob, truth)), 2.0), eps);
  Tensor total = add_scalar(tape, add(tape, sum(tape, prob), sum(tape, truth)), eps);
  return add_scalar(tape, scale(tape, div(tape, overlap, total), -1.0), 1.0);
}

}  // namespace dabdu
