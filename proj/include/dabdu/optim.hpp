#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dabdu/model.hpp"

namespace dabdu {

/// Classic momentum: v <- momentum*v + g; p <- p - lr*v.
inline void sgd_update(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
                       double momentum) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd_update buffers differ in length");
  }
  for (std::size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= lr * velocity[i];
  }
}

/// Rescales all accumulated gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping; max_norm <= 0 only measures.
inline double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& e : params.entries()) {
    for (double g : e.tensor.node().grad) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (const auto& e : params.entries()) {
      for (double& g : e.tensor.node().grad) g *= k;
    }
  }
  return norm;
}

class Sgd {
 public:
  Sgd(double lr, double momentum) : lr_(lr), momentum_(momentum) {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }

  // Parameters without an accumulated gradient see a zero gradient.
  void step(ParameterStore& params) {
    auto entries = params.entries();
    if (velocity_.empty()) {
      for (const auto& e : entries) velocity_.emplace_back(e.tensor.numel(), 0.0);
    }
    if (velocity_.size() != entries.size()) throw ContractError("optimizer used with a different parameter store");
    for (std::size_t k = 0; k < entries.size(); ++k) {
      auto& node = entries[k].tensor.node();
      if (node.grad.empty()) {
        const std::vector<double> zero(node.value.size(), 0.0);
        sgd_update(entries[k].tensor.mutable_values(), zero, velocity_[k], lr_, momentum_);
      } else {
        sgd_update(entries[k].tensor.mutable_values(), node.grad, velocity_[k], lr_, momentum_);
      }
    }
  }

  double learning_rate() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

}  // namespace dabdu
