#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "dabdu/rng.hpp"
#include "dabdu/tensor.hpp"

namespace dabdu {

using LossBuilder = std::function<Tensor(Tape&)>;

/// |g - g_fd| / max(1, |g|, |g_fd|)
inline double gradient_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

struct GradientComparison {
  std::size_t coordinates = 0;
  double max_error = 0.0;
};

/// Compares reverse-mode gradients of `build` with respect to the leaves in
/// `wrt` against central differences. `sample` > 0 checks that many randomly
/// chosen coordinates; 0 checks them all. The leaves are restored exactly.
inline GradientComparison compare_gradients(const LossBuilder& build, std::vector<Tensor> wrt, double step = 1e-5,
                                            std::size_t sample = 0, std::uint64_t seed = 0) {
  for (auto& t : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    const Tensor loss = build(tape);
    tape.backward(loss);
    for (const auto& t : wrt) analytic.push_back(t.grad());
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < wrt.size(); ++k) {
    for (std::size_t i = 0; i < wrt[k].numel(); ++i) coords.emplace_back(k, i);
  }
  if (sample > 0 && sample < coords.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < sample; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                              static_cast<std::int64_t>(coords.size()) - 1));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(sample);
  }

  auto evaluate = [&] {
    Tape tape(false);
    return build(tape).item();
  };
  GradientComparison out;
  for (const auto& [k, i] : coords) {
    auto values = wrt[k].mutable_values();
    const double original = values[i];
    values[i] = original + step;
    const double up = evaluate();
    values[i] = original - step;
    const double down = evaluate();
    values[i] = original;
    const double numeric = (up - down) / (2.0 * step);
    out.max_error = std::max(out.max_error, gradient_error(analytic[k][i], numeric));
    ++out.coordinates;
  }
  for (auto& t : wrt) t.zero_grad();
  return out;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor random_normal(Rng& rng, Shape shape, double stddev = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace dabdu
