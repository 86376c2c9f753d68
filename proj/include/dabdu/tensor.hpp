#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dabdu/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dabdu {

// Row-major extents. Rank 0 (empty shape) is a scalar.
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until the node receives a gradient
  bool requires_grad = false;
  bool leaf = true;

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline std::optional<bool>& checked_override() {
  static std::optional<bool> value;
  return value;
}

}  // namespace detail

// Finiteness assertions after every recorded op. Enabled by DABDU_CHECKED=1
// unless overridden programmatically.
inline bool checked_mode() {
  if (const auto& o = detail::checked_override()) return *o;
  static const bool from_env = [] {
    const char* v = std::getenv("DABDU_CHECKED");
    return v != nullptr && std::string(v) == "1";
  }();
  return from_env;
}

inline void set_checked_mode(std::optional<bool> enabled) { detail::checked_override() = enabled; }

// Keeps large tensor buffers on the heap instead of returning them to the OS
// after every step. With glibc's defaults each multi-megabyte buffer is a
// fresh mmap and page-faults in again, which costs more than the arithmetic.
// Call once from main(); a no-op elsewhere.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
#endif
}

/// Dense double-precision array with optional gradient. Copies share the
/// underlying node; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (dabdu::numel(shape) != values.size()) {
      throw ShapeError("tensor of shape " + to_string(shape) + " needs " +
                       std::to_string(dabdu::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double v) {
    const auto n = dabdu::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }

  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return shape()[axis];
  }
  std::size_t numel() const { return node().value.size(); }

  std::span<const double> values() const { return node().value; }

  // Only leaves may be written; recorded op outputs are immutable.
  std::span<double> mutable_values() {
    if (!node().leaf) throw ContractError("cannot mutate the output of a recorded operation");
    return node_->value;
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() needs a single-element tensor, shape is " + to_string(shape()));
    return node().value[0];
  }

  double at(std::size_t i) const { return node().value.at(i); }

  bool requires_grad() const { return node().requires_grad; }

  Tensor& set_requires_grad(bool on) {
    if (!node().leaf) throw ContractError("requires_grad can only be set on leaf tensors");
    node_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return node().leaf; }
  bool has_grad() const { return !node().grad.empty(); }

  // Zeros when no gradient has been accumulated yet.
  std::vector<double> grad() const {
    if (node().grad.empty()) return std::vector<double>(numel(), 0.0);
    return node().grad;
  }

  void zero_grad() { node().grad.clear(); }

  Tensor clone() const {
    Tensor t(shape(), node().value);
    t.node_->requires_grad = node().leaf && node().requires_grad;
    return t;
  }

  Tensor detach() const { return Tensor(shape(), node().value); }

  detail::Node& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient-accumulation buffer for an op input, or an empty span when the input
// does not participate in differentiation.
inline std::span<double> grad_sink(const Tensor& t) {
  auto& n = t.node();
  if (!n.requires_grad) return {};
  return n.grad_buffer();
}

/// Records differentiable operations in execution order. One tape per
/// forward/backward step; nothing is recorded globally.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return entries_.size(); }

  // Wraps an op result. The backward rule is kept only when recording and at
  // least one input requires a gradient.
  Tensor emit(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
              BackwardFn backward) {
    return emit(std::move(shape), std::move(values), std::span<const Tensor>(inputs.begin(), inputs.size()),
                std::move(backward));
  }

  Tensor emit(Shape shape, std::vector<double> values, std::span<const Tensor> inputs, BackwardFn backward) {
    Tensor out(std::move(shape), std::move(values));
    if (checked_mode()) {
      for (double v : out.values()) {
        if (!std::isfinite(v)) throw NumericError("non-finite value produced by an operation");
      }
    }
    const bool needs_grad =
        recording_ && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    auto& node = out.node();
    node.leaf = false;
    if (needs_grad) {
      node.requires_grad = true;
      entries_.push_back(Entry{out.node_ptr(), std::move(backward)});
    }
    return out;
  }

  // Populates d(loss)/d(leaf) for every trainable leaf reached from `loss`.
  // Leaf gradients accumulate across calls; intermediate gradients are reset.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) throw ContractError("loss does not depend on any trainable tensor");
    if (loss.is_leaf()) {
      loss.node().grad_buffer()[0] += 1.0;
      return;
    }
    const auto it = std::find_if(entries_.rbegin(), entries_.rend(),
                                 [&](const Entry& e) { return e.output == loss.node_ptr(); });
    if (it == entries_.rend()) throw ContractError("loss was not recorded on this tape");

    for (auto& e : entries_) e.output->grad.clear();
    loss.node().grad_buffer()[0] = 1.0;
    for (auto e = it; e != entries_.rend(); ++e) {
      if (e->output->grad.empty()) continue;
      e->backward(e->output->grad);
    }
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    std::shared_ptr<detail::Node> output;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Entry> entries_;
};

}  // namespace dabdu
