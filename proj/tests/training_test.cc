#include "hiphop/training.h"

#include <gtest/gtest.h>

#include <cmath>

#include "hiphop/eval.h"
#include "test_util.h"

namespace hiphop {
namespace {

using testing::labeled;

Matrix rows(std::initializer_list<std::initializer_list<double>> values) {
  Matrix m(values.size(), values.begin()->size());
  int r = 0;
  for (const auto& row : values) {
    int c = 0;
    for (double x : row) m(r, c++) = x;
    ++r;
  }
  return m;
}

TEST(HardNegatives, OnlyDisjointSessionsQualify) {
  std::mt19937_64 rng(1);
  // [a,b], [a,c], [d,e]
  std::vector<std::vector<ItemId>> sets = {{0, 1}, {0, 2}, {3, 4}};
  Matrix fused = rows({{1, 0}, {1, 0.1}, {0, 1}});
  HardNegatives h = sample_hard_negatives(sets, fused, 1, nullptr, rng);
  EXPECT_EQ(h.index[0], std::vector<int>{2});
  EXPECT_EQ(h.index[1], std::vector<int>{2});
  EXPECT_EQ(h.fallback, 0);
}

TEST(HardNegatives, OverlapEverywhereFallsBack) {
  std::mt19937_64 rng(2);
  std::vector<std::vector<ItemId>> sets = {{0, 1}, {0, 2}, {1, 2}};
  Matrix fused = rows({{1, 0}, {0, 1}, {1, 1}});
  HardNegatives h = sample_hard_negatives(sets, fused, 2, nullptr, rng);
  EXPECT_EQ(h.fallback, 6);
  for (int i = 0; i < 3; ++i) {
    for (int j : h.index[i]) {
      EXPECT_NE(j, i);
      EXPECT_LT(j, 3);
    }
  }
}

TEST(HardNegatives, MostSimilarDisjointChosen) {
  std::mt19937_64 rng(3);
  std::vector<std::vector<ItemId>> sets = {{0}, {1}, {2}, {3}, {4}, {5}};
  // Cosines to the anchor: 0.1, 0.9, -0.5, 0.6, 0.3.
  auto at = [](double c) { return std::initializer_list<double>{c, std::sqrt(1 - c * c)}; };
  Matrix fused(6, 2);
  fused.row(0) << 1, 0;
  double cos[] = {0.1, 0.9, -0.5, 0.6, 0.3};
  for (int i = 0; i < 5; ++i) fused.row(i + 1) << 3 * cos[i], 3 * std::sqrt(1 - cos[i] * cos[i]);
  (void)at;
  HardNegatives h = sample_hard_negatives(sets, fused, 3, nullptr, rng);
  EXPECT_EQ(h.index[0], (std::vector<int>{2, 4, 5}));
}

TEST(HardNegatives, ShortfallPaddedFromReservoir) {
  std::mt19937_64 rng(4);
  std::vector<std::vector<ItemId>> sets = {{0, 1}, {1, 2}};
  Matrix fused = rows({{1, 0}, {0, 1}});
  NegativeReservoir reservoir;
  reservoir.push({{{0, 7}, Eigen::RowVector2d(1, 1)}, {{8, 9}, Eigen::RowVector2d(1, -1)}});
  HardNegatives h = sample_hard_negatives(sets, fused, 1, &reservoir, rng);
  // Only reservoir entry 1 ({8, 9}) is disjoint from session 0; both are
  // disjoint from session 1.
  EXPECT_EQ(h.index[0], std::vector<int>{2 + 1});
  EXPECT_GE(h.index[1][0], 2);
  EXPECT_EQ(h.from_reservoir, 2);
  EXPECT_EQ(h.fallback, 0);
}

TEST(HardNegatives, ReservoirKeepsRecentBatches) {
  NegativeReservoir r;
  r.capacity_batches = 2;
  for (int b = 0; b < 3; ++b) r.push({{{b}, Eigen::RowVector2d(b, 0)}});
  auto e = r.entries();
  ASSERT_EQ(e.size(), 2u);
  EXPECT_EQ(e[0]->items, std::vector<ItemId>{1});
  EXPECT_EQ(e[1]->items, std::vector<ItemId>{2});
}

TEST(HardNegatives, BatchOfOneThrows) {
  std::mt19937_64 rng(5);
  EXPECT_THROW(sample_hard_negatives({{0}}, Matrix::Ones(1, 2), 1, nullptr, rng), std::invalid_argument);
}

TEST(ContrastiveLoss, SymmetricCaseIsLn2) {
  Eigen::RowVector2d a(1, 0), p(0.6, 0.8);
  Matrix n = rows({{0.6, -0.8}});
  EXPECT_NEAR(contrastive_loss(a, p, n, 1.0), std::log(2.0), 1e-12);
}

TEST(ContrastiveLoss, SeparatedLimitIsZero) {
  Eigen::RowVector2d a(1, 0);
  EXPECT_LT(contrastive_loss(a, a, rows({{-1, 0}}), 0.1), 1e-8);
}

TEST(ContrastiveLoss, HandArithmetic) {
  Eigen::RowVector2d a(1, 0), p(0.5, std::sqrt(0.75));
  Matrix n = rows({{0.2, std::sqrt(0.96)}, {-0.1, std::sqrt(0.99)}});
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + std::exp(0.4) + std::exp(-0.2)));
  EXPECT_NEAR(contrastive_loss(a, p, n, 0.5), expected, 1e-12);
  // Denominator with the raw positive similarity.
  const double strict = -(1.0 - std::log(0.5 + std::exp(0.4) + std::exp(-0.2)));
  EXPECT_NEAR(contrastive_loss(a, p, n, 0.5, true), strict, 1e-12);
}

TEST(ContrastiveLoss, NonPositiveTauThrows) {
  Eigen::RowVector2d a(1, 0);
  EXPECT_THROW(contrastive_loss(a, a, rows({{0, 1}}), 0.0), std::invalid_argument);
  EXPECT_THROW(contrastive_loss(a, a, Matrix(0, 2), 0.5), std::invalid_argument);
}

TEST(AnnealTemperature, Schedule) {
  TrainConfig c;
  c.epochs_max = 10;
  EXPECT_DOUBLE_EQ(anneal_temperature(0, c), 0.5);
  EXPECT_DOUBLE_EQ(anneal_temperature(10, c), 0.1);
  EXPECT_DOUBLE_EQ(anneal_temperature(5, c), 0.3);
  EXPECT_DOUBLE_EQ(anneal_temperature(50, c), 0.1);
  for (int e = 1; e <= 12; ++e) EXPECT_LE(anneal_temperature(e, c), anneal_temperature(e - 1, c));
  c.tau_end = c.tau_start;
  EXPECT_DOUBLE_EQ(anneal_temperature(7, c), 0.5);
  EXPECT_THROW(anneal_temperature(-1, c), std::invalid_argument);
}

TEST(PredictionLoss, UniformOverFour) {
  Matrix p = Matrix::Constant(1, 4, 0.25);
  const double expected = -(std::log(0.25) + 3 * std::log(0.75));
  EXPECT_NEAR(prediction_loss(p, {2}), expected, 1e-12);
  EXPECT_NEAR(prediction_loss(p, {2}), 2.249, 5e-4);
}

TEST(PredictionLoss, ConfidentTargetIsNearZero) {
  Matrix p = Matrix::Zero(1, 3);
  p(0, 1) = 1 - 1e-12;
  EXPECT_LT(prediction_loss(p, {1}), 1e-9);
}

TEST(PredictionLoss, BatchAveraging) {
  Matrix one = rows({{0.1, 0.7, 0.2}});
  Matrix two = rows({{0.1, 0.7, 0.2}, {0.1, 0.7, 0.2}});
  EXPECT_DOUBLE_EQ(prediction_loss(one, {0}), prediction_loss(two, {0, 0}));
  EXPECT_DOUBLE_EQ(prediction_loss(one, {0}, 1e-12, PredictionLossKind::kCategorical), -std::log(0.1));
}

TEST(PredictionLoss, FiniteUnderClamping) {
  Matrix p = rows({{0, 1, 0}});
  EXPECT_TRUE(std::isfinite(prediction_loss(p, {0})));
  EXPECT_TRUE(std::isfinite(prediction_loss(p, {0}, 1e-12, PredictionLossKind::kCategorical)));
}

ModelConfig toy_model() {
  ModelConfig c;
  c.dim = 8;
  c.num_intents = 2;
  c.top_k = 2;
  c.local_k = 2;
  c.dropout = 0.0;
  return c;
}

PreparedBatch toy_batch(const ModelConfig& c) {
  return prepare_batch({{0, 1, 2}, {3, 4}, {5, 6, 5}, {7, 8}, {9}, {2, 1}}, c, {3, 5, 7, 9, 0, 0});
}

TEST(JointLoss, LambdaZeroIsPredictionExactly) {
  ModelConfig mc = toy_model();
  Model m(mc, 10, std::nullopt, 1);
  TrainConfig tc;
  tc.lambda = 0.0;
  std::mt19937_64 rng(1);
  ag::Graph g;
  JointLoss jl = joint_loss(g, m, toy_batch(mc), tc, 0.5, rng, nullptr);
  EXPECT_EQ(jl.total.value()(0, 0), jl.prediction.value()(0, 0));
}

TEST(JointLoss, LinearInLambda) {
  ModelConfig mc = toy_model();
  Model m(mc, 10, std::nullopt, 2);
  PreparedBatch batch = toy_batch(mc);
  TrainConfig tc;
  std::mt19937_64 rng(2);
  ag::Graph g0;
  HardNegatives negs = joint_loss(g0, m, batch, tc, 0.5, rng, nullptr).negatives;
  std::vector<double> totals;
  double pred = 0, con = 0;
  for (double lambda : {0.0, 0.3, 0.6}) {
    tc.lambda = lambda == 0.0 ? 1e-300 : lambda;
    ag::Graph g;
    JointLoss jl = joint_loss(g, m, batch, tc, 0.5, rng, nullptr, true, &negs);
    pred = jl.prediction.value()(0, 0);
    con = jl.contrastive.value()(0, 0);
    totals.push_back(jl.total.value()(0, 0));
  }
  EXPECT_NEAR(totals[1] - totals[0], totals[2] - totals[1], 1e-12);
  EXPECT_NEAR(totals[1], pred + 0.3 * con, 1e-12);
}

TEST(JointLoss, WeightedSumArithmetic) {
  // 1.0 + 0.3 * 0.5.
  ag::Graph g;
  ag::Var total = ag::add(g.constant(Matrix::Constant(1, 1, 1.0)), ag::scale(g.constant(Matrix::Constant(1, 1, 0.5)), 0.3));
  EXPECT_NEAR(total.value()(0, 0), 1.15, 1e-15);
}

TEST(JointLoss, SampledNegativesAreDisjoint) {
  ModelConfig mc = toy_model();
  Model m(mc, 10, std::nullopt, 3);
  PreparedBatch batch = toy_batch(mc);
  TrainConfig tc;
  tc.n_neg = 2;
  std::mt19937_64 rng(3);
  ag::Graph g;
  JointLoss jl = joint_loss(g, m, batch, tc, 0.5, rng, nullptr);
  EXPECT_EQ(jl.negatives.fallback, 0);
  for (int i = 0; i < batch.size; ++i) {
    for (int j : jl.negatives.index[i]) {
      for (ItemId x : batch.item_sets[i]) {
        EXPECT_EQ(std::count(batch.item_sets[j].begin(), batch.item_sets[j].end(), x), 0);
      }
    }
  }
}

TEST(JointStep, ConsecutiveStepsDescend) {
  ModelConfig mc = toy_model();
  Model m(mc, 10, std::nullopt, 4);
  PreparedBatch batch = toy_batch(mc);
  TrainConfig tc;
  TrainState state;
  state.rng.seed(5);
  state.lr = 1e-2;
  state.tau = 0.5;
  double l0 = joint_step(m, batch, state, tc).total;
  double l1 = joint_step(m, batch, state, tc).total;
  double l2 = joint_step(m, batch, state, tc).total;
  EXPECT_LT(l1, l0);
  EXPECT_LT(l2, l1);
}

TEST(JointStep, NonFiniteLossAbortsWithBatch) {
  ModelConfig mc = toy_model();
  Model m(mc, 10, std::nullopt, 6);
  m.params().at("item_embedding").row(9).setConstant(std::nan(""));
  TrainState state;
  state.lr = 1e-3;
  state.tau = 0.5;
  try {
    joint_step(m, toy_batch(mc), state, TrainConfig{});
    FAIL() << "expected runtime_error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("[0,1,2] -> 3"), std::string::npos) << e.what();
  }
}

TEST(Schedule, LearningRateSteps) {
  TrainConfig c;
  for (int e = 0; e < 3; ++e) EXPECT_DOUBLE_EQ(learning_rate(e, c), 1e-3);
  for (int e = 3; e < 6; ++e) EXPECT_NEAR(learning_rate(e, c), 1e-4, 1e-18);
  EXPECT_NEAR(learning_rate(6, c), 1e-5, 1e-18);
}

TEST(Schedule, EarlyStoppingOnPlateau) {
  TrainState s;
  std::vector<double> metrics = {10, 10, 10, 10};
  int stopped_after = -1;
  for (size_t e = 0; e < metrics.size(); ++e) {
    if (update_early_stopping(s, metrics[e], 3)) {
      stopped_after = static_cast<int>(e) + 1;
      break;
    }
    EXPECT_LE(s.epochs_since_improve, 3);
  }
  EXPECT_EQ(stopped_after, 4);
}

TEST(Schedule, ImprovementResetsPatience) {
  TrainState s;
  EXPECT_FALSE(update_early_stopping(s, 10, 2));
  EXPECT_FALSE(update_early_stopping(s, 9, 2));
  EXPECT_FALSE(update_early_stopping(s, 11, 2));
  EXPECT_FALSE(update_early_stopping(s, 11, 2));
  EXPECT_TRUE(update_early_stopping(s, 11, 2));
}

TEST(MakeBatches, TrailingSingletonMerged) {
  std::vector<Session> s(7);
  std::vector<const Session*> p;
  for (auto& x : s) p.push_back(&x);
  auto b = make_batches(p, 3);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1].size(), 4u);
  EXPECT_EQ(make_batches(p, 2).back().size(), 3u);
}

TEST(TrainConfig, JsonAndValidation) {
  TrainConfig c;
  c.lambda = 0.1;
  c.loss = PredictionLossKind::kCategorical;
  EXPECT_EQ(to_json(train_config_from_json(to_json(c))), to_json(c));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"lamda", 0.1}}), std::invalid_argument);
  c.tau_end = 0.9;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.n_neg = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

// Sessions walking a ring of n items; the next item is always the successor.
std::vector<Session> ring_examples(int n, int count, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> start(0, n - 1), len(1, 4);
  std::vector<Session> out;
  for (int i = 0; i < count; ++i) {
    int s = start(rng), l = len(rng);
    std::vector<ItemId> items;
    for (int t = 0; t < l; ++t) items.push_back((s + t) % n);
    out.push_back(labeled(items, (s + l) % n, "s" + std::to_string(i)));
  }
  return out;
}

TEST(Fit, DeterministicHistoryAndBestRestored) {
  auto train = ring_examples(20, 300, 1);
  auto valid = ring_examples(20, 60, 2);
  ModelConfig mc = toy_model();
  mc.dropout = 0.2;
  TrainConfig tc;
  tc.epochs_max = 3;
  tc.batch_size = 50;
  tc.lr = 1e-2;
  Model a(mc, 20, std::nullopt, 7), b(mc, 20, std::nullopt, 7);
  FitResult ra = fit(a, train, valid, tc);
  FitResult rb = fit(b, train, valid, tc);
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (size_t e = 0; e < ra.history.size(); ++e) EXPECT_EQ(to_json(ra.history[e]), to_json(rb.history[e]));
  EXPECT_EQ(ra.history[0].lr, 1e-2);
  Metrics m = evaluate_model(a, valid, tc.eval_k, tc.batch_size);
  EXPECT_DOUBLE_EQ(m.hr, ra.best_metric);
}

}  // namespace
}  // namespace hiphop
