#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <numeric>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dabdu/tensor.hpp"

namespace dabdu {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

inline ConstMatMap cmap(std::span<const double> s, std::size_t rows, std::size_t cols) {
  return ConstMatMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline MatMap map(std::span<double> s, std::size_t rows, std::size_t cols) {
  return MatMap(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// How the second operand of a binary elementwise op lines up with the first.
enum class Broadcast { Same, Scalar, PerChannel, ChannelSingleton };

struct BroadcastPlan {
  Broadcast kind;
  std::size_t channels = 1;  // extent of axis 1 of `a`
  std::size_t inner = 1;     // product of extents after axis 1

};

// Accepted forms: identical shapes; single-element b; rank-1 b matching a's
// axis 1 (bias-style); b equal to a except extent 1 on axis 1.
inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return {Broadcast::Same};
  if (numel(b) == 1) return {Broadcast::Scalar};
  if (a.size() >= 2) {
    const std::size_t inner = numel(Shape(a.begin() + 2, a.end()));
    if (b.size() == 1 && b[0] == a[1]) return {Broadcast::PerChannel, a[1], inner};
    if (b.size() == a.size() && b[1] == 1) {
      bool ok = b[0] == a[0];
      for (std::size_t d = 2; d < a.size(); ++d) ok = ok && b[d] == a[d];
      if (ok) return {Broadcast::ChannelSingleton, a[1], inner};
    }
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(b) + " onto " + to_string(a));
}

inline void check_axis(std::size_t axis, std::size_t rank, const char* op) {
  if (axis >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  return {numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis))), s[axis],
          numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()))};
}

// Calls f(i, j) for every element i of `a` and its partner j in `b`.
template <class F>
void for_each_pair(const BroadcastPlan& plan, std::size_t size, F&& f) {
  switch (plan.kind) {
    case Broadcast::Same:
      for (std::size_t i = 0; i < size; ++i) f(i, i);
      return;
    case Broadcast::Scalar:
      for (std::size_t i = 0; i < size; ++i) f(i, std::size_t{0});
      return;
    case Broadcast::PerChannel: {
      const std::size_t outer = size / (plan.channels * plan.inner);
      std::size_t i = 0;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < plan.channels; ++c) {
          for (std::size_t k = 0; k < plan.inner; ++k) f(i++, c);
        }
      }
      return;
    }
    case Broadcast::ChannelSingleton: {
      const std::size_t outer = size / (plan.channels * plan.inner);
      std::size_t i = 0;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < plan.channels; ++c) {
          for (std::size_t k = 0; k < plan.inner; ++k) f(i++, o * plan.inner + k);
        }
      }
      return;
    }
  }
}

template <class Fwd, class GradA, class GradB>
Tensor binary(Tape& tape, const Tensor& a, const Tensor& b, const char* name, Fwd fwd, GradA ga, GradB gb) {
  const auto plan = plan_broadcast(a.shape(), b.shape(), name);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for_each_pair(plan, av.size(), [&](std::size_t i, std::size_t j) { out[i] = fwd(av[i], bv[j]); });
  return tape.emit(a.shape(), std::move(out), {a, b}, [a, b, plan, ga, gb](std::span<const double> g) {
    const auto av = a.values();
    const auto bv = b.values();
    if (auto da = grad_sink(a); !da.empty()) {
      for_each_pair(plan, g.size(), [&](std::size_t i, std::size_t j) { da[i] += ga(av[i], bv[j], g[i]); });
    }
    if (auto db = grad_sink(b); !db.empty()) {
      for_each_pair(plan, g.size(), [&](std::size_t i, std::size_t j) { db[j] += gb(av[i], bv[j], g[i]); });
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

// Hadamard product.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; }, [](double x, double, double g) { return g * x; });
}

inline Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary(
      tape, a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; }, [](double x, double y, double g) { return -g * x / (y * y); });
}

inline Tensor scale(Tape& tape, const Tensor& x, double factor) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  return tape.emit(x.shape(), std::move(out), {x}, [x, factor](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * factor;
  });
}

inline Tensor add_scalar(Tape& tape, const Tensor& x, double offset) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + offset;
  return tape.emit(x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Sigmoid, Tanh, Relu, Identity };

inline double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

namespace detail {

// Eigen runs unaligned leading elements through its scalar exp, so the
// same input could round differently depending on where the buffer lives.
// Staging through an aligned fixed-size block keeps every element on the
// packet path and makes results independent of address.
template <class F>
void blockwise(std::span<double> v, F&& f) {
  constexpr Eigen::Index kBlock = 64;
  Eigen::Array<double, kBlock, 1> buf;
  for (std::size_t off = 0; off < v.size(); off += kBlock) {
    const std::size_t n = std::min<std::size_t>(kBlock, v.size() - off);
    buf.setZero();
    std::copy_n(v.data() + off, n, buf.data());
    f(buf);
    std::copy_n(buf.data(), n, v.data() + off);
  }
}

// exp(-x) overflows to +inf for very negative x, which still gives exactly 0.
inline void sigmoid_inplace(std::span<double> v) {
  blockwise(v, [](auto& a) { a = (1.0 + (-a).exp()).inverse(); });
}

// tanh(x) = 1 - 2 / (exp(2x) + 1). Absolute error stays near 1e-16 and the
// ends saturate at exactly +-1; libm tanh is several times slower here.
inline void tanh_inplace(std::span<double> v) {
  blockwise(v, [](auto& a) { a = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0); });
}

}  // namespace detail

inline Tensor activate(Tape& tape, Activation kind, const Tensor& x) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  switch (kind) {
    case Activation::Sigmoid:
      std::copy(xv.begin(), xv.end(), out.begin());
      detail::sigmoid_inplace(out);
      break;
    case Activation::Tanh:
      std::copy(xv.begin(), xv.end(), out.begin());
      detail::tanh_inplace(out);
      break;
    case Activation::Relu:
      for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
      break;
    case Activation::Identity:
      std::copy(xv.begin(), xv.end(), out.begin());
      break;
  }
  // Sigmoid and tanh derivatives are taken from the outputs; keep a copy.
  std::vector<double> y = (kind == Activation::Sigmoid || kind == Activation::Tanh) ? out : std::vector<double>{};
  return tape.emit(x.shape(), std::move(out), {x}, [x, kind, y = std::move(y)](std::span<const double> g) {
    auto dx = grad_sink(x);
    const auto xv = x.values();
    switch (kind) {
      case Activation::Sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
        break;
      case Activation::Tanh:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      case Activation::Relu:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += xv[i] > 0.0 ? g[i] : 0.0;
        break;
      case Activation::Identity:
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        break;
    }
  });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) { return activate(tape, Activation::Sigmoid, x); }
inline Tensor tanh(Tape& tape, const Tensor& x) { return activate(tape, Activation::Tanh, x); }
inline Tensor relu(Tape& tape, const Tensor& x) { return activate(tape, Activation::Relu, x); }

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul needs rank-2 operands, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  detail::map(out, m, n).noalias() = detail::cmap(a.values(), m, k) * detail::cmap(b.values(), k, n);
  return tape.emit({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    const auto G = detail::cmap(g, m, n);
    if (auto da = grad_sink(a); !da.empty()) {
      detail::map(da, m, k).noalias() += G * detail::cmap(b.values(), k, n).transpose();
    }
    if (auto db = grad_sink(b); !db.empty()) {
      detail::map(db, k, n).noalias() += detail::cmap(a.values(), m, k).transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;

  std::size_t patch() const { return channels * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*stride + i - pad][ox*stride + j - pad]
// Output columns [lo, hi) of a kernel tap whose source column lies inside the
// image.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t j) {
  std::size_t lo = 0;
  while (lo < g.out_w && lo * g.stride + j < g.pad) ++lo;
  std::size_t hi = lo;
  while (hi < g.out_w && hi * g.stride + j < g.pad + g.width) ++hi;
  return {lo, hi};
}

inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
        const auto [lo, hi] = valid_columns(g, j);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          double* dst = row + oy * g.out_w;
          const std::size_t y = oy * g.stride + i;
          if (y < g.pad || y >= g.pad + g.height || lo >= hi) {
            std::fill_n(dst, g.out_w, 0.0);
            continue;
          }
          std::fill_n(dst, lo, 0.0);
          std::fill(dst + hi, dst + g.out_w, 0.0);
          const double* src = x + (c * g.height + (y - g.pad)) * g.width;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + j - g.pad];
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * g.pixels();
        const auto [lo, hi] = valid_columns(g, j);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::size_t y = oy * g.stride + i;
          if (y < g.pad || y >= g.pad + g.height) continue;
          const double* src = row + oy * g.out_w;
          double* dst = dx + (c * g.height + (y - g.pad)) * g.width;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + j - g.pad] += src[ox];
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip). x is [N,C,H,W], w is [F,C,kh,kw],
/// bias is [F] or undefined.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride = 1,
                     std::size_t padding = 0) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d needs [N,C,H,W] input and [F,C,kh,kw] kernel, got " + to_string(x.shape()) +
                     " and " + to_string(w.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d stride must be at least 1");
  const std::size_t n = x.dim(0), filters = w.dim(0);
  detail::ConvGeometry geo{x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), stride, padding, 0, 0};
  if (w.dim(1) != geo.channels) {
    throw ShapeError("conv2d channel mismatch: input " + to_string(x.shape()) + ", kernel " + to_string(w.shape()));
  }
  if (geo.kh > geo.height + 2 * padding || geo.kw > geo.width + 2 * padding) {
    throw ShapeError("conv2d kernel " + to_string(w.shape()) + " larger than padded input " + to_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != filters)) {
    throw ShapeError("conv2d bias must be [" + std::to_string(filters) + "], got " + to_string(bias.shape()));
  }
  geo.out_h = conv_output_extent(geo.height, geo.kh, stride, padding);
  geo.out_w = conv_output_extent(geo.width, geo.kw, stride, padding);

  const bool pointwise = geo.kh == 1 && geo.kw == 1 && stride == 1 && padding == 0;
  const std::size_t in_size = geo.channels * geo.height * geo.width;
  const std::size_t out_size = filters * geo.pixels();
  const auto xv = x.values();
  const auto W = detail::cmap(w.values(), filters, geo.patch());

  std::vector<double> out(n * out_size);
  std::vector<double> cols(pointwise ? 0 : geo.patch() * geo.pixels());
  for (std::size_t s = 0; s < n; ++s) {
    const double* src = xv.data() + s * in_size;
    if (!pointwise) detail::im2col(src, geo, cols.data());
    const double* colp = pointwise ? src : cols.data();
    auto O = detail::map(std::span<double>(out.data() + s * out_size, out_size), filters, geo.pixels());
    O.noalias() = W * detail::ConstMatMap(colp, static_cast<Eigen::Index>(geo.patch()),
                                          static_cast<Eigen::Index>(geo.pixels()));
    if (bias.defined()) {
      const auto bv = bias.values();
      for (std::size_t f = 0; f < filters; ++f) O.row(static_cast<Eigen::Index>(f)).array() += bv[f];
    }
  }

  Shape out_shape{n, filters, geo.out_h, geo.out_w};
  std::vector<Tensor> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return tape.emit(std::move(out_shape), std::move(out), inputs,
                   [x, w, bias, geo, n, filters, pointwise, in_size, out_size](std::span<const double> g) {
                     auto dx = grad_sink(x);
                     auto dw = grad_sink(w);
                     auto db = bias.defined() ? grad_sink(bias) : std::span<double>{};
                     const auto xv = x.values();
                     const auto W = detail::cmap(w.values(), filters, geo.patch());
                     std::vector<double> cols(pointwise ? 0 : geo.patch() * geo.pixels());
                     std::vector<double> dcols(dx.empty() || pointwise ? 0 : geo.patch() * geo.pixels());
                     for (std::size_t s = 0; s < n; ++s) {
                       const auto G = detail::ConstMatMap(g.data() + s * out_size, static_cast<Eigen::Index>(filters),
                                                          static_cast<Eigen::Index>(geo.pixels()));
                       if (!dw.empty()) {
                         const double* src = xv.data() + s * in_size;
                         if (!pointwise) detail::im2col(src, geo, cols.data());
                         const double* colp = pointwise ? src : cols.data();
                         detail::map(dw, filters, geo.patch()).noalias() +=
                             G * detail::ConstMatMap(colp, static_cast<Eigen::Index>(geo.patch()),
                                                     static_cast<Eigen::Index>(geo.pixels()))
                                     .transpose();
                       }
                       if (!dx.empty()) {
                         if (pointwise) {
                           detail::map(std::span<double>(dx.data() + s * in_size, in_size), geo.patch(),
                                       geo.pixels())
                               .noalias() += W.transpose() * G;
                         } else {
                           detail::map(dcols, geo.patch(), geo.pixels()).noalias() = W.transpose() * G;
                           detail::col2im_add(dcols.data(), geo, dx.data() + s * in_size);
                         }
                       }
                       if (!db.empty()) {
                         // plain loop: Eigen's sum() order depends on buffer alignment
                         for (std::size_t f = 0; f < filters; ++f) {
                           const double* row = g.data() + s * out_size + f * geo.pixels();
                           db[f] += std::accumulate(row, row + geo.pixels(), 0.0);
                         }
                       }
                     }
                   });
}

/// Max pooling without implicit padding; the window must tile the input.
inline Tensor maxpool2d(Tape& tape, const Tensor& x, std::size_t window = 2, std::size_t stride = 2) {
  if (x.rank() != 4) throw ShapeError("maxpool2d needs [N,C,H,W], got " + to_string(x.shape()));
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d window and stride must be positive");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0) {
    throw ShapeError("maxpool2d window " + std::to_string(window) + "/stride " + std::to_string(stride) +
                     " does not tile " + to_string(x.shape()));
  }
  const std::size_t oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const auto xv = x.values();
  std::vector<double> out(nc * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (p * h + oy * stride) * w + ox * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = (p * h + oy * stride + i) * w + ox * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = xv[best];
        argmax[o] = best;
      }
    }
  }
  return tape.emit({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x},
                   [x, argmax = std::move(argmax)](std::span<const double> g) {
                     auto dx = grad_sink(x);
                     for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
                   });
}

/// Nearest-neighbour upsampling by an integer factor.
inline Tensor upsample2d(Tape& tape, const Tensor& x, std::size_t factor = 2) {
  if (x.rank() != 4) throw ShapeError("upsample2d needs [N,C,H,W], got " + to_string(x.shape()));
  if (factor == 0) throw ShapeError("upsample2d factor must be positive");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto xv = x.values();
  std::vector<double> out(nc * oh * ow);
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
    }
  }
  return tape.emit({x.dim(0), x.dim(1), oh, ow}, std::move(out), {x}, [x, nc, h, w, factor](std::span<const double> g) {
    auto dx = grad_sink(x);
    const std::size_t oh = h * factor, ow = w * factor;
    for (std::size_t p = 0; p < nc; ++p) {
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) dx[(p * h + y / factor) * w + xx / factor] += g[(p * oh + y) * ow + xx];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor concat(Tape& tape, std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat needs at least one tensor");
  const Shape& ref = parts.front().shape();
  detail::check_axis(axis, ref.size(), "concat");
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) throw ShapeError("concat operands disagree off-axis: " + to_string(ref) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
  }
  const auto split = detail::split_at(ref, axis);
  std::vector<std::size_t> blocks;  // contiguous run per operand per outer index
  for (const auto& t : parts) blocks.push_back(t.dim(axis) * split.inner);
  const std::size_t row = std::accumulate(blocks.begin(), blocks.end(), std::size_t{0});

  std::vector<double> out(split.outer * row);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto v = parts[p].values();
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.data() + o * blocks[p], blocks[p], out.data() + o * row + offset);
    }
    offset += blocks[p];
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return tape.emit(std::move(out_shape), std::move(out), inputs,
                   [inputs, blocks, row, outer = split.outer](std::span<const double> g) {
                     std::size_t offset = 0;
                     for (std::size_t p = 0; p < inputs.size(); ++p) {
                       if (auto d = grad_sink(inputs[p]); !d.empty()) {
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = g.data() + o * row + offset;
                           double* dst = d.data() + o * blocks[p];
                           for (std::size_t i = 0; i < blocks[p]; ++i) dst[i] += src[i];
                         }
                       }
                       offset += blocks[p];
                     }
                   });
}

inline Tensor concat(Tape& tape, std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(tape, std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

inline Tensor slice(Tape& tape, const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  detail::check_axis(axis, x.rank(), "slice");
  if (length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for axis extent " + std::to_string(x.dim(axis)));
  }
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  const std::size_t src_row = split.extent * split.inner, dst_row = length * split.inner;
  const auto xv = x.values();
  std::vector<double> out(split.outer * dst_row);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.data() + o * src_row + start * split.inner, dst_row, out.data() + o * dst_row);
  }
  return tape.emit(std::move(out_shape), std::move(out), {x},
                   [x, split, start, src_row, dst_row](std::span<const double> g) {
                     auto dx = grad_sink(x);
                     for (std::size_t o = 0; o < split.outer; ++o) {
                       for (std::size_t i = 0; i < dst_row; ++i) dx[o * src_row + start * split.inner + i] += g[o * dst_row + i];
                     }
                   });
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return tape.emit(std::move(shape), std::move(out), {x}, [x](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

/// [N,C,H,W] -> [N*H*W, C]; row index is (n*H + h)*W + w.
inline Tensor to_rows(Tape& tape, const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("to_rows needs [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) out[(s * hw + p) * c + ch] = xv[(s * c + ch) * hw + p];
    }
  }
  return tape.emit({n * hw, c}, std::move(out), {x}, [x, n, c, hw](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) dx[(s * c + ch) * hw + p] += g[(s * hw + p) * c + ch];
      }
    }
  });
}

/// Inverse of to_rows.
inline Tensor from_rows(Tape& tape, const Tensor& rows, std::size_t n, std::size_t h, std::size_t w) {
  if (rows.rank() != 2 || rows.dim(0) != n * h * w) {
    throw ShapeError("from_rows: " + to_string(rows.shape()) + " is not [" + std::to_string(n * h * w) + ",C]");
  }
  const std::size_t c = rows.dim(1), hw = h * w;
  const auto rv = rows.values();
  std::vector<double> out(rv.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t p = 0; p < hw; ++p) out[(s * c + ch) * hw + p] = rv[(s * hw + p) * c + ch];
    }
  }
  return tape.emit({n, c, h, w}, std::move(out), {rows}, [rows, n, c, hw](std::span<const double> g) {
    auto dr = grad_sink(rows);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < hw; ++p) dr[(s * hw + p) * c + ch] += g[(s * c + ch) * hw + p];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and reductions

/// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
  detail::check_axis(axis, x.rank(), "softmax");
  const auto split = detail::split_at(x.shape(), axis);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t in = 0; in < split.inner; ++in) {
      const std::size_t base = o * split.extent * split.inner + in;
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < split.extent; ++k) peak = std::max(peak, xv[base + k * split.inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < split.extent; ++k) {
        const double e = std::exp(xv[base + k * split.inner] - peak);
        out[base + k * split.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < split.extent; ++k) out[base + k * split.inner] /= total;
    }
  }
  std::vector<double> y = out;
  return tape.emit(x.shape(), std::move(out), {x}, [x, split, y = std::move(y)](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t in = 0; in < split.inner; ++in) {
        const std::size_t base = o * split.extent * split.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < split.extent; ++k) dot += g[base + k * split.inner] * y[base + k * split.inner];
        for (std::size_t k = 0; k < split.extent; ++k) {
          const std::size_t i = base + k * split.inner;
          dx[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

/// Sum of all elements, as a scalar.
inline Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return tape.emit(Shape{}, {total}, {x}, [x](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (double& d : dx) d += g[0];
  });
}

inline Tensor mean(Tape& tape, const Tensor& x) { return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel())); }

/// Sum along `axis`; the axis is removed from the result shape.
inline Tensor sum(Tape& tape, const Tensor& x, std::size_t axis) {
  detail::check_axis(axis, x.rank(), "sum");
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto xv = x.values();
  std::vector<double> out(split.outer * split.inner, 0.0);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < split.extent; ++k) {
      for (std::size_t in = 0; in < split.inner; ++in) {
        out[o * split.inner + in] += xv[(o * split.extent + k) * split.inner + in];
      }
    }
  }
  return tape.emit(std::move(out_shape), std::move(out), {x}, [x, split](std::span<const double> g) {
    auto dx = grad_sink(x);
    for (std::size_t o = 0; o < split.outer; ++o) {
      for (std::size_t k = 0; k < split.extent; ++k) {
        for (std::size_t in = 0; in < split.inner; ++in) dx[(o * split.extent + k) * split.inner + in] += g[o * split.inner + in];
      }
    }
  });
}

inline Tensor mean(Tape& tape, const Tensor& x, std::size_t axis) {
  detail::check_axis(axis, x.rank(), "mean");
  return scale(tape, sum(tape, x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

}  // namespace dabdu
