#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "dabdu/dabdu.hpp"

using namespace dabdu;

namespace {

std::vector<double> vals(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

// Central difference of a scalar function of one leaf coordinate.
double numeric_partial(const std::function<Tensor(Tape&)>& f, Tensor leaf, std::size_t i, double h) {
  auto v = leaf.mutable_values();
  const double orig = v[i];
  v[i] = orig + h;
  double up;
  {
    Tape t(false);
    up = f(t).item();
  }
  v[i] = orig - h;
  double down;
  {
    Tape t(false);
    down = f(t).item();
  }
  v[i] = orig;
  return (up - down) / (2 * h);
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}, {}), ShapeError);
  EXPECT_EQ(Tensor::zeros({2, 3, 4}).numel(), 24u);
}

TEST(Tensor, CopiesShareCloneDoesNot) {
  Tensor a({2}, {1, 2});
  Tensor b = a;
  b.mutable_values()[0] = 5;
  EXPECT_EQ(a.at(0), 5);
  Tensor c = a.clone();
  c.mutable_values()[0] = 7;
  EXPECT_EQ(a.at(0), 5);
}

TEST(Tensor, OpOutputsAreImmutable) {
  Tape tape;
  Tensor a({2}, {1, 2});
  Tensor b = add(tape, a, a);
  EXPECT_THROW(b.mutable_values(), ContractError);
}

TEST(Elementwise, Golden) {
  Tape tape;
  EXPECT_EQ(vals(mul(tape, Tensor({3}, {1, 2, 3}), Tensor({3}, {4, 5, 6}))), (std::vector<double>{4, 10, 18}));
  Tensor x({2, 2}, {0.5, -1, 3, 2});
  EXPECT_EQ(vals(add(tape, x, Tensor::zeros({2, 2}))), vals(x));
  EXPECT_EQ(vals(sub(tape, x, x)), std::vector<double>(4, 0.0));
  EXPECT_EQ(vals(div(tape, Tensor({2}, {1, 9}), Tensor({2}, {4, 3}))), (std::vector<double>{0.25, 3}));
}

TEST(Elementwise, MulGradientMatchesFiniteDifference) {
  Tensor a = Tensor({1}, {2}).set_requires_grad(true);
  Tensor b({1}, {3});
  auto f = [&](Tape& t) { return sum(t, mul(t, a, b)); };
  Tape tape;
  tape.backward(f(tape));
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_NEAR(numeric_partial(f, a, 0, 1e-6), 3.0, 1e-8);
}

TEST(Elementwise, BroadcastForms) {
  Tape tape;
  Tensor x({1, 2, 1, 2}, {1, 2, 3, 4});
  // per channel
  EXPECT_EQ(vals(add(tape, x, Tensor({2}, {10, 20}))), (std::vector<double>{11, 12, 23, 24}));
  // scalar
  EXPECT_EQ(vals(mul(tape, x, Tensor::scalar(2))), (std::vector<double>{2, 4, 6, 8}));
  // channel singleton
  EXPECT_EQ(vals(mul(tape, x, Tensor({1, 1, 1, 2}, {1, -1}))), (std::vector<double>{1, -2, 3, -4}));
  // everything else is rejected
  EXPECT_THROW(add(tape, x, Tensor::zeros({3})), ShapeError);
  EXPECT_THROW(add(tape, x, Tensor::zeros({1, 2, 2, 1})), ShapeError);
}

TEST(Activations, Golden) {
  Tape tape;
  EXPECT_DOUBLE_EQ(sigmoid(tape, Tensor::scalar(0)).item(), 0.5);
  EXPECT_EQ(vals(relu(tape, Tensor({2}, {-3, 3}))), (std::vector<double>{0, 3}));
  EXPECT_DOUBLE_EQ(tanh(tape, Tensor::scalar(0)).item(), 0.0);
  EXPECT_NEAR(tanh(tape, Tensor::scalar(0.7)).item(), std::tanh(0.7), 1e-15);
  EXPECT_EQ(sigmoid(tape, Tensor::scalar(-800)).item(), 0.0);
  EXPECT_EQ(sigmoid(tape, Tensor::scalar(800)).item(), 1.0);
  EXPECT_EQ(tanh(tape, Tensor::scalar(-400)).item(), -1.0);
  Tensor id = activate(tape, Activation::Identity, Tensor({2}, {1.5, -2}));
  EXPECT_EQ(vals(id), (std::vector<double>{1.5, -2}));
}

TEST(Activations, SigmoidSlopeAtZero) {
  Tensor x = Tensor::scalar(0).set_requires_grad(true);
  auto f = [&](Tape& t) { return sigmoid(t, x); };
  Tape tape;
  tape.backward(f(tape));
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.25);
  EXPECT_NEAR(numeric_partial(f, x, 0, 1e-6), 0.25, 1e-10);
}

TEST(Matmul, Golden) {
  Tape tape;
  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(vals(matmul(tape, Tensor({2, 2}, {1, 0, 0, 1}), m)), vals(m));
  EXPECT_EQ(matmul(tape, Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item(), 11.0);
  EXPECT_THROW(matmul(tape, Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Conv2d, Golden) {
  Tape tape;
  Rng rng(3);
  Tensor x = random_tensor(rng, {2, 3, 5, 4});
  Tensor id = Tensor::zeros({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) id.mutable_values()[c * 3 + c] = 1.0;
  EXPECT_EQ(vals(conv2d(tape, x, id, Tensor::zeros({3}))), vals(x));
  Tensor y = conv2d(tape, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), Tensor::zeros({1}));
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 9.0);
  EXPECT_THROW(conv2d(tape, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1})), ShapeError);
  EXPECT_THROW(conv2d(tape, Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1})), ShapeError);
}

// Direct nested-loop cross-correlation as an independent oracle.
TEST(Conv2d, MatchesDirectLoops) {
  Rng rng(11);
  for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 0}, {1, 1}, {2, 1}, {2, 0}, {3, 2}}) {
    Tensor x = random_tensor(rng, {2, 3, 7, 6});
    Tensor w = random_tensor(rng, {4, 3, 3, 2});
    Tensor b = random_tensor(rng, {4});
    Tape tape(false);
    Tensor y = conv2d(tape, x, w, b, stride, pad);
    const std::size_t oh = (7 + 2 * pad - 3) / stride + 1, ow = (6 + 2 * pad - 2) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{2, 4, oh, ow}));
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t f = 0; f < 4; ++f)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            double acc = b.at(f);
            for (std::size_t c = 0; c < 3; ++c)
              for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 2; ++j) {
                  const long yy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                  const long xx = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                  if (yy < 0 || xx < 0 || yy >= 7 || xx >= 6) continue;
                  acc += w.at(((f * 3 + c) * 3 + i) * 2 + j) * x.at(((n * 3 + c) * 7 + yy) * 6 + xx);
                }
            EXPECT_NEAR(y.at(((n * 4 + f) * oh + oy) * ow + ox), acc, 1e-12);
          }
  }
}

TEST(ShapeAlgebra, ConvAndPoolExtentSweep) {
  Rng rng(5);
  for (std::size_t h = 1; h <= 9; ++h)
    for (std::size_t w = 1; w <= 9; w += 2)
      for (std::size_t k = 1; k <= 4; ++k)
        for (std::size_t stride = 1; stride <= 3; ++stride)
          for (std::size_t pad = 0; pad <= 2; ++pad) {
            Tape tape(false);
            Tensor x = Tensor::zeros({1, 1, h, w});
            Tensor ker = Tensor::zeros({1, 1, k, k});
            if (k > h + 2 * pad || k > w + 2 * pad) {
              EXPECT_THROW(conv2d(tape, x, ker, Tensor::zeros({1}), stride, pad), ShapeError);
              continue;
            }
            Tensor y = conv2d(tape, x, ker, Tensor::zeros({1}), stride, pad);
            EXPECT_EQ(y.dim(2), (h + 2 * pad - k) / stride + 1);
            EXPECT_EQ(y.dim(3), (w + 2 * pad - k) / stride + 1);
          }
  for (std::size_t h = 1; h <= 12; ++h) {
    Tape tape(false);
    Tensor x = Tensor::zeros({1, 2, h, 4});
    if (h % 2 != 0) {
      EXPECT_THROW(maxpool2d(tape, x), ShapeError);
    } else {
      EXPECT_EQ(maxpool2d(tape, x).shape(), (Shape{1, 2, h / 2, 2}));
    }
    EXPECT_EQ(upsample2d(tape, x, 3).shape(), (Shape{1, 2, 3 * h, 12}));
  }
}

TEST(PoolUpsample, Golden) {
  Tape tape;
  EXPECT_EQ(maxpool2d(tape, Tensor({1, 1, 2, 2}, {1, 2, 3, 4})).item(), 4.0);
  EXPECT_EQ(vals(upsample2d(tape, Tensor({1, 1, 1, 1}, {5}), 2)), std::vector<double>(4, 5.0));
}

TEST(PoolUpsample, ArgmaxRoutingAndSummedBackward) {
  Tensor x = Tensor({1, 1, 2, 2}, {1, 7, 3, 4}).set_requires_grad(true);
  Tape tape;
  tape.backward(sum(tape, maxpool2d(tape, x)));
  EXPECT_EQ(x.grad(), (std::vector<double>{0, 1, 0, 0}));
  Tensor u = Tensor({1, 1, 1, 1}, {2}).set_requires_grad(true);
  Tape t2;
  t2.backward(sum(t2, upsample2d(t2, u, 2)));
  EXPECT_EQ(u.grad()[0], 4.0);
}

TEST(Structural, ConcatSliceReshape) {
  Tape tape;
  Tensor a = Tensor::full({2, 2, 3, 3}, 1.0), b = Tensor::full({2, 3, 3, 3}, 2.0);
  Tensor c = concat(tape, {a, b}, 1);
  EXPECT_EQ(c.shape(), (Shape{2, 5, 3, 3}));
  EXPECT_EQ(c.at(2 * 9), 2.0);
  EXPECT_EQ(c.at(5 * 9), 1.0);
  EXPECT_EQ(vals(slice(tape, c, 1, 2, 3)), vals(concat(tape, {b}, 1)));
  EXPECT_THROW(concat(tape, {a, Tensor::zeros({2, 2, 3, 4})}, 1), ShapeError);
  EXPECT_THROW(concat(tape, {a, b}, 4), ShapeError);
  EXPECT_EQ(reshape(tape, c, {10, 9}).shape(), (Shape{10, 9}));
  EXPECT_THROW(reshape(tape, c, {7, 9}), ShapeError);
}

TEST(Structural, RowsRoundTrip) {
  Rng rng(2);
  Tensor x = random_tensor(rng, {2, 3, 4, 5});
  Tape tape;
  Tensor r = to_rows(tape, x);
  ASSERT_EQ(r.shape(), (Shape{40, 3}));
  // row (n*H + h)*W + w holds the channel vector at (n, h, w)
  EXPECT_EQ(r.at(((1 * 4 + 2) * 5 + 3) * 3 + 2), x.at(((1 * 3 + 2) * 4 + 2) * 5 + 3));
  EXPECT_EQ(vals(from_rows(tape, r, 2, 4, 5)), vals(x));
}

TEST(Softmax, GoldenAndNormalisation) {
  Tape tape;
  EXPECT_EQ(vals(softmax(tape, Tensor({2}, {0, 0}), 0)), (std::vector<double>{0.5, 0.5}));
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor(rng, {4, 6, 3}, -50, 50);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor s = softmax(tape, x, axis);
      Tensor total = sum(tape, s, axis);
      for (double v : total.values()) EXPECT_NEAR(v, 1.0, 1e-12);
    }
  }
  Tensor big({3}, {1000, 1000, -1000});
  Tensor s = softmax(tape, big, 0);
  EXPECT_NEAR(s.at(0), 0.5, 1e-15);
  EXPECT_EQ(s.at(2), 0.0);
  EXPECT_THROW(softmax(tape, big, 1), ShapeError);
}

TEST(Reduce, Semantics) {
  Tape tape;
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(sum(tape, x).item(), 21.0);
  EXPECT_EQ(mean(tape, x).item(), 3.5);
  EXPECT_EQ(vals(sum(tape, x, 0)), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(vals(mean(tape, x, 1)), (std::vector<double>{2, 5}));
  EXPECT_THROW(sum(tape, x, 2), ShapeError);
}

TEST(Backward, Basics) {
  Rng rng(1);
  Tensor x = random_tensor(rng, {2, 3, 2}).set_requires_grad(true);
  Tape tape;
  tape.backward(sum(tape, x));
  EXPECT_EQ(x.grad(), std::vector<double>(12, 1.0));

  Tensor y = Tensor({1}, {3}).set_requires_grad(true);
  Tape t2;
  t2.backward(sum(t2, mul(t2, y, y)));
  EXPECT_EQ(y.grad()[0], 6.0);
}

TEST(Backward, LeafGradientsAccumulate) {
  Tensor y = Tensor({1}, {3}).set_requires_grad(true);
  Tape tape;
  Tensor loss = sum(tape, mul(tape, y, y));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_EQ(y.grad()[0], 12.0);
  y.zero_grad();
  tape.backward(loss);
  EXPECT_EQ(y.grad()[0], 6.0);
}

TEST(Backward, Contracts) {
  Tensor x = Tensor({2}, {1, 2}).set_requires_grad(true);
  Tape tape;
  Tensor twice = scale(tape, x, 2);
  EXPECT_THROW(tape.backward(twice), ContractError);
  Tape other;
  Tensor loss = sum(other, x);
  EXPECT_THROW(tape.backward(loss), ContractError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1)), ContractError);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  // f = (x*x) + (x*x) via one shared node; df/dx = 4x
  Tensor x = Tensor::scalar(1.5).set_requires_grad(true);
  Tape tape;
  Tensor sq = mul(tape, x, x);
  tape.backward(add(tape, sq, sq));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Determinism, SameSeedSameBits) {
  auto run = [] {
    Rng rng(42);
    Tensor x = random_tensor(rng, {2, 3, 6, 6});
    Tensor w = random_tensor(rng, {4, 3, 3, 3});
    Tape tape(false);
    return vals(softmax(tape, conv2d(tape, x, w, Tensor::zeros({4}), 1, 1), 1));
  };
  EXPECT_EQ(run(), run());
}

TEST(CheckedMode, FlagsNonFinite) {
  set_checked_mode(true);
  Tape tape;
  EXPECT_THROW(div(tape, Tensor({1}, {1}), Tensor({1}, {0})), NumericError);
  set_checked_mode(false);
  EXPECT_NO_THROW(div(tape, Tensor({1}, {1}), Tensor({1}, {0})));
  set_checked_mode(std::nullopt);
}

TEST(Dtf, RoundTripAndCorruption) {
  Rng rng(4);
  Tensor t = random_tensor(rng, {2, 3, 4});
  const std::string bytes = dtf::encode_tensor(t);
  EXPECT_EQ(bytes.substr(0, 8), "DABDUTF1");
  Tensor back = dtf::decode_tensor(bytes);
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.values().data(), t.values().data(), t.numel() * sizeof(double)), 0);
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, bytes.size() - 1}) {
    try {
      dtf::decode_tensor(std::string_view(bytes).substr(0, cut));
      FAIL() << "truncation at " << cut << " accepted";
    } catch (const FormatError& e) {
      EXPECT_LE(e.offset(), bytes.size());
    }
  }
  EXPECT_THROW(dtf::decode_tensor(bytes + "x"), FormatError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(dtf::decode_tensor(bad), FormatError);
}
