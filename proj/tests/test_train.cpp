#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dabdu/dabdu.hpp"

using namespace dabdu;

namespace {

Tensor random_mask(Rng& rng, std::size_t n, double p) {
  std::vector<double> v(n * n);
  for (auto& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
  return Tensor({1, n, n}, std::move(v));
}

data::DatasetSpec tiny_data() {
  data::DatasetSpec s;
  s.n_train = 8;
  s.n_val = 4;
  s.size = 16;
  s.radius_min = 2;
  s.radius_max = 4;
  s.seed = 3;
  return s;
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.levels = 2;
  c.stem_channels = 4;
  c.growth_rate = 2;
  c.block_layers = 1;
  c.attention_dim = 2;
  c.height = c.width = 16;
  return c;
}

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 3;
  t.seed = 11;
  return t;
}

}  // namespace

TEST(Dice, WorkedCases) {
  EXPECT_EQ(dice_coefficient(Tensor({4}, {1, 1, 0, 0}), Tensor({4}, {1, 0, 1, 0})).dc, 0.5);
  EXPECT_EQ(dice_coefficient(Tensor({3}, {1, 1, 1}), Tensor({3}, {1, 1, 1})).dc, 1.0);
  EXPECT_EQ(dice_coefficient(Tensor({3}, {0, 0, 0}), Tensor({3}, {0, 0, 0})).dc, 1.0);
  EXPECT_EQ(dice_coefficient(Tensor({3}, {0, 0, 0}), Tensor({3}, {0, 1, 0})).dc, 0.0);
  EXPECT_THROW(dice_coefficient(Tensor({3}, {0, 0.5, 0}), Tensor({3}, {0, 1, 0})), ContractError);
  EXPECT_THROW(dice_coefficient(Tensor({3}, {0, 0, 0}), Tensor({4}, {0, 1, 0, 0})), ShapeError);
}

// Integer pixel counting with the empty/empty convention spelled out.
TEST(Dice, MatchesBruteForceCounting) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const double pa = trial % 10 == 0 ? 0.0 : rng.uniform(), pb = trial % 7 == 0 ? 0.0 : rng.uniform();
    const Tensor a = random_mask(rng, 16, pa), b = random_mask(rng, 16, pb);
    int inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < 256; ++i) {
      na += a.at(i) == 1.0;
      nb += b.at(i) == 1.0;
      inter += a.at(i) == 1.0 && b.at(i) == 1.0;
    }
    const double expected = na + nb == 0 ? 1.0 : 2.0 * inter / (na + nb);
    const auto r = dice_coefficient(a, b);
    EXPECT_EQ(r.dc, expected);
    EXPECT_EQ(r.intersection, static_cast<std::size_t>(inter));
    if (na + nb > 0 && (na == 0 || nb == 0)) {
      EXPECT_EQ(r.dc, 0.0);
    }
  }
}

TEST(Dice, SymmetricAndPermutationInvariant) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = random_mask(rng, 8, 0.4), b = random_mask(rng, 8, 0.3);
    EXPECT_EQ(dice_coefficient(a, b).dc, dice_coefficient(b, a).dc);
    std::vector<std::size_t> perm(64);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 63; i > 0; --i) std::swap(perm[i], perm[static_cast<std::size_t>(rng.uniform_int(0, i))]);
    std::vector<double> pa(64), pb(64);
    for (std::size_t i = 0; i < 64; ++i) pa[perm[i]] = a.at(i), pb[perm[i]] = b.at(i);
    EXPECT_EQ(dice_coefficient(Tensor({1, 8, 8}, pa), Tensor({1, 8, 8}, pb)).dc, dice_coefficient(a, b).dc);
  }
}

TEST(SoftDice, PerfectPredictionIsZero) {
  Rng rng(3);
  const Tensor y = random_mask(rng, 8, 0.3);
  Tape tape(false);
  EXPECT_EQ(soft_dice_loss(tape, y, y).item(), 0.0);
  EXPECT_EQ(soft_dice_loss(tape, Tensor::zeros({4}), Tensor::zeros({4})).item(), 0.0);
}

TEST(SoftDice, NearBinaryLimit) {
  Rng rng(4);
  const double delta = 1e-6;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor y = random_mask(rng, 16, 0.3), guess = random_mask(rng, 16, 0.3);
    for (const Tensor* target : {&y, &guess}) {
      std::vector<double> p(256);
      for (std::size_t i = 0; i < 256; ++i) p[i] = target->at(i) == 1.0 ? 1 - delta : delta;
      Tape tape(false);
      const double loss = soft_dice_loss(tape, Tensor(y.shape(), p), y).item();
      const auto d = dice_coefficient(*target, y);
      // the smoothed score is the hard score with eps added top and bottom
      const double smoothed = (2.0 * d.intersection + 1.0) / static_cast<double>(d.size_pred + d.size_true + 1);
      EXPECT_NEAR(loss, 1.0 - smoothed, 1e-4);
      if (target == &y) {
        EXPECT_NEAR(loss, 1.0 - d.dc, 1e-4);
      }
    }
  }
}

TEST(SoftDice, GoldenValue) {
  Tape tape(false);
  // overlap 0.5, sum p 1.5, sum y 1: 1 - (1 + 1) / (2.5 + 1)
  EXPECT_DOUBLE_EQ(soft_dice_loss(tape, Tensor({3}, {0.5, 1.0, 0.0}), Tensor({3}, {1, 0, 0})).item(), 1.0 - 2.0 / 3.5);
}

TEST(Sgd, HandRecursion) {
  std::vector<double> p{1.0}, v{0.0};
  const std::vector<double> g{0.5};
  sgd_update(p, g, v, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  sgd_update(p, g, v, 0.1, 0.9);
  EXPECT_DOUBLE_EQ(v[0], 0.95);
  EXPECT_DOUBLE_EQ(p[0], 0.855);
  // momentum 0 is plain gradient descent
  std::vector<double> q{2.0}, w{0.0};
  sgd_update(q, g, w, 0.2, 0.0);
  EXPECT_DOUBLE_EQ(q[0], 1.9);
  EXPECT_THROW(Sgd(-0.1, 0.9), ConfigError);
  EXPECT_THROW(Sgd(0.1, 1.0), ConfigError);
}

TEST(Sgd, MatchesRecursionOverSteps) {
  ParameterStore store;
  store.add("w", Tensor::parameter({2}, {1.0, -2.0}));
  Sgd opt(0.05, 0.9);
  double p0 = 1.0, p1 = -2.0, v0 = 0.0, v1 = 0.0;
  for (int step = 0; step < 10; ++step) {
    store.zero_grad();
    Tensor w = store["w"];
    Tape tape;
    tape.backward(sum(tape, mul(tape, w, w)));  // grad 2w
    opt.step(store);
    v0 = 0.9 * v0 + 2 * p0, v1 = 0.9 * v1 + 2 * p1;
    p0 -= 0.05 * v0, p1 -= 0.05 * v1;
    EXPECT_DOUBLE_EQ(store["w"].at(0), p0);
    EXPECT_DOUBLE_EQ(store["w"].at(1), p1);
  }
}

TEST(ClipGradNorm, RescalesOnlyAboveThreshold) {
  ParameterStore store;
  store.add("a", Tensor::parameter({2}, {3.0, 0.0}));
  store.add("b", Tensor::parameter({1}, {2.0}));
  auto run = [&] {
    store.zero_grad();
    Tensor a = store["a"], b = store["b"];
    Tape tape;
    tape.backward(add(tape, sum(tape, mul(tape, a, a)), sum(tape, mul(tape, b, b))));  // grads (6, 0), (4)
  };
  run();
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 0.0), std::sqrt(52.0));
  EXPECT_DOUBLE_EQ(store["a"].grad()[0], 6.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 100.0), std::sqrt(52.0));
  EXPECT_DOUBLE_EQ(store["b"].grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(store, 1.0), std::sqrt(52.0));
  EXPECT_NEAR(clip_grad_norm(store, 0.0), 1.0, 1e-15);
  EXPECT_NEAR(store["a"].grad()[0] / store["b"].grad()[0], 1.5, 1e-15);
}

TEST(Training, ZeroLearningRateLeavesParametersAlone) {
  const auto d = data::generate_dataset(tiny_data());
  Model m(tiny_model());
  const Model before(tiny_model());
  TrainConfig t = tiny_train();
  t.learning_rate = 0.0;
  const auto r = train(m, d, t);
  for (std::size_t k = 0; k < m.parameters().size(); ++k) {
    const auto a = m.parameters().entries()[k].tensor.values(), b = before.parameters().entries()[k].tensor.values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
  ASSERT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.epochs) EXPECT_TRUE(std::isfinite(e.train_loss));
  // Batch soft Dice is not additive over samples, so reshuffled batches move
  // the train loss even with frozen weights. Validation sees no shuffling.
  EXPECT_EQ(r.epochs[0].val_dc_mean, r.epochs[1].val_dc_mean);
  EXPECT_EQ(r.epochs[0].val_dc_std, r.epochs[1].val_dc_std);
}

TEST(Training, FixedSeedIsBitExact) {
  const auto d = data::generate_dataset(tiny_data());
  auto once = [&] {
    Model m(tiny_model());
    return report_json(train(m, d, tiny_train())).dump();
  };
  const std::string a = once();
  EXPECT_EQ(a, once());
  EXPECT_EQ(a.find("wall_clock"), std::string::npos);
}

TEST(Training, ReportRoundTrip) {
  const auto d = data::generate_dataset(tiny_data());
  Model m(tiny_model());
  const auto r = train(m, d, tiny_train());
  EXPECT_EQ(r.variant, "DA-BDense-UNet");
  EXPECT_EQ(r.final_dc_mean, r.epochs.back().val_dc_mean);
  EXPECT_EQ(r.final_dc_mean, evaluate(m, d.val).mean);
  const auto back = report_from_json(report_json(r, true));
  EXPECT_EQ(report_json(back, true), report_json(r, true));
}

TEST(Training, ConfigValidation) {
  TrainConfig t;
  t.batch_size = 0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.threshold = 1.0;
  EXPECT_THROW(t.validate(), ConfigError);
  t = {};
  t.grad_clip = -1;
  EXPECT_THROW(t.validate(), ConfigError);
}

TEST(Training, ShuffleIsAPermutation) {
  const auto o = shuffled_order(50, 9, 3);
  std::vector<std::size_t> sorted = o;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(o, shuffled_order(50, 9, 3));
  EXPECT_NE(o, shuffled_order(50, 9, 4));
}

TEST(Training, ConstantBaseline) {
  std::vector<data::Sample> s(2);
  s[0].mask = Tensor({1, 2, 2}, {1, 1, 0, 0});  // all-foreground DC 2*2/(4+2)
  s[1].mask = Tensor({1, 2, 2}, {0, 0, 0, 0});  // all-background DC 1
  // foreground mean (2/3 + 0)/2, background mean (0 + 1)/2
  EXPECT_DOUBLE_EQ(constant_baseline_dc(s), 0.5);
}

TEST(Ablation, HarnessShapeAndReferenceMetadata) {
  const auto d = data::generate_dataset(tiny_data());
  TrainConfig t = tiny_train();
  t.epochs = 1;
  const auto table = run_ablation(tiny_model(), d, {Variant::BDLSTMDenseUNet, Variant::DABDenseUNet}, t);
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_EQ(table.rows[0].variant, "BDLSTM-DenseUNet");
  EXPECT_EQ(table.rows[1].variant, "DA-BDense-UNet");
  for (const auto& r : table.rows) EXPECT_EQ(r.seed, t.seed);
  const auto j = ablation_json(table);
  EXPECT_EQ(j["seed"], t.seed);
  EXPECT_EQ(j["rows"].size(), 2u);
  EXPECT_EQ(j["rows"][1]["reference_dc"]["dc"], 0.8520);
  EXPECT_EQ(j["rows"][0]["reference_dc"]["dc"], 0.8435);
  EXPECT_EQ(j["rows"][1]["reference_dc"]["reproducible"], false);
  EXPECT_TRUE(j.contains("reference_note"));
  const std::string text = ablation_text(table);
  EXPECT_NE(text.find("BDLSTM-DenseUNet"), std::string::npos);
  EXPECT_NE(text.find("0.8520"), std::string::npos);
  EXPECT_THROW(run_ablation(tiny_model(), d, {Variant::DABDenseUNet}, t), ContractError);
}

TEST(Ablation, FailedVariantDoesNotStopTheRest) {
  auto d = data::generate_dataset(tiny_data());
  TrainConfig t = tiny_train();
  t.epochs = 1;
  ModelConfig base = tiny_model();
  base.attention_dim = 0;  // rejected only by variants that build channel attention
  const auto table = run_ablation(base, d, {Variant::BDLSTMDenseUNet, Variant::DABDenseUNet}, t);
  ASSERT_EQ(table.rows.size(), 2u);
  EXPECT_EQ(table.rows[1].status, "failed");
  EXPECT_FALSE(table.rows[1].error.empty());
}
