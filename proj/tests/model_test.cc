#include "hiphop/model.h"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "grad_check.h"
#include "test_util.h"

namespace hiphop {
namespace {

using testing::random_matrix;

TEST(GnnPropagate, SingleNodePassesThrough) {
  std::vector<ItemId> s = {4};
  SessionGraph g = build_session_graph(s);
  Matrix h0 = random_matrix(1, 3, 1);
  Matrix w = random_matrix(3, 3, 2);
  EXPECT_EQ(gnn_propagate(g, h0, w, 1), h0);
  EXPECT_EQ(gnn_propagate(g, h0, w, 5), h0);
}

TEST(GnnPropagate, ChainWithIdentityWeight) {
  std::vector<ItemId> s = {0, 1};
  SessionGraph g = build_session_graph(s);
  Matrix h0(2, 3);
  h0 << 0.2, 0.5, 1.0,
        0.7, 0.1, 0.3;
  Matrix out = gnn_propagate(g, h0, Matrix::Identity(3, 3), 1);
  // a has no incoming edge; b receives a.
  EXPECT_EQ(out.row(0), h0.row(0));
  EXPECT_EQ(out.row(1), h0.row(0));
}

TEST(GnnPropagate, OutputsNonNegativeWhereUpdated) {
  std::vector<ItemId> s = {0, 1, 2, 0, 3, 1};
  SessionGraph g = build_session_graph(s);
  Matrix h0 = random_matrix(g.num_nodes(), 5, 3);
  Matrix out = gnn_propagate(g, h0, random_matrix(5, 5, 4), 2);
  for (int i = 0; i < g.num_nodes(); ++i) {
    ASSERT_TRUE(g.has_incoming(i));
    EXPECT_GE(out.row(i).minCoeff(), 0.0);
  }
}

struct ReadoutParams {
  Matrix q = random_matrix(1, 4, 10);
  Matrix w_last = random_matrix(4, 4, 11);
  Matrix w_item = random_matrix(4, 4, 12);
  Matrix bias = random_matrix(1, 4, 13);
};

TEST(SoftAttentionReadout, SingletonSession) {
  ReadoutParams p;
  Matrix h = random_matrix(1, 4, 14);
  auto r = soft_attention_readout(h, p.q, p.w_last, p.w_item, p.bias);
  EXPECT_DOUBLE_EQ(r.alpha(0), 1.0);
  EXPECT_TRUE(r.h_sequence.isApprox(h.row(0)));
}

TEST(SoftAttentionReadout, RepeatedItem) {
  ReadoutParams p;
  Matrix h = random_matrix(1, 4, 15).replicate(5, 1);
  auto r = soft_attention_readout(h, p.q, p.w_last, p.w_item, p.bias);
  EXPECT_TRUE(r.h_sequence.isApprox(h.row(0), 1e-12));
}

TEST(SoftAttentionReadout, WeightsSumToOne) {
  ReadoutParams p;
  auto r = soft_attention_readout(random_matrix(7, 4, 16), p.q, p.w_last, p.w_item, p.bias);
  EXPECT_NEAR(r.alpha.sum(), 1.0, 1e-12);
  EXPECT_GT(r.alpha.minCoeff(), 0.0);
}

TEST(MultiIntent, SingleQueryIsPlainAttention) {
  Matrix h = random_matrix(3, 4, 20);
  Matrix q = random_matrix(1, 4, 21);
  Eigen::VectorXd logits = h * q.transpose();
  Eigen::VectorXd a = (logits.array() - logits.maxCoeff()).exp();
  a /= a.sum();
  Eigen::RowVectorXd expected = a.transpose() * h;
  EXPECT_TRUE(multi_intent(h, q).isApprox(expected, 1e-12));
}

TEST(MultiIntent, MaxPoolsIntentVectors) {
  // Two orthogonal items, each intent focused almost entirely on one item.
  Matrix h(2, 2);
  h << 1, 5,
       3, 2;
  Matrix q(2, 2);
  q << 0, 100,
       100, -100;
  Eigen::RowVectorXd out = multi_intent(h, q);
  EXPECT_NEAR(out(0), 3.0, 1e-9);
  EXPECT_NEAR(out(1), 5.0, 1e-9);
}

TEST(MultiIntent, SingletonSession) {
  Matrix h = random_matrix(1, 4, 22);
  EXPECT_TRUE(multi_intent(h, random_matrix(3, 4, 23)).isApprox(h.row(0), 1e-12));
}

TEST(SessionSimConv, BatchOfOneIsZero) {
  SimilarityGraph g = build_similarity_graph({{1, 2}}, SimilarityScope::kGlobal);
  EXPECT_EQ(session_sim_conv(random_matrix(1, 3, 1), g).norm(), 0.0);
}

TEST(SessionSimConv, PairExchangesVectors) {
  SimilarityGraph g = build_similarity_graph({{1, 2}, {2, 1}}, SimilarityScope::kGlobal);
  Matrix h = random_matrix(2, 3, 2);
  Matrix out = session_sim_conv(h, g);
  EXPECT_TRUE(out.row(0).isApprox(h.row(1)));
  EXPECT_TRUE(out.row(1).isApprox(h.row(0)));
}

TEST(SessionSimConv, IdenticalSessionsAverageToShared) {
  SimilarityGraph g = build_similarity_graph({{1, 2}, {1, 2}, {1, 2}}, SimilarityScope::kGlobal);
  Matrix h = random_matrix(1, 3, 3).replicate(3, 1);
  EXPECT_TRUE(session_sim_conv(h, g).isApprox(h, 1e-12));
}

TEST(SessionSimConv, MismatchThrows) {
  SimilarityGraph g = build_similarity_graph({{1}, {1}}, SimilarityScope::kGlobal);
  EXPECT_THROW(session_sim_conv(random_matrix(3, 2, 1), g), std::invalid_argument);
}

struct GateParams {
  Matrix w1, w2, bias, w0;
  GateParams() : w1(2, 2), w2(2, 2), bias(1, 2), w0(1, 2) {
    w1 << 1, 0,
          0, -1;
    w2 << 0.5, 0,
          0, 0.5;
    bias << 0.1, 0.2;
    w0 << 2, -1;
  }
};

TEST(IntentGuidedAttention, HandComputedPreSoftmax) {
  GateParams p;
  Eigen::RowVectorXd h_prime(2), h_intent(2);
  h_prime << 1, -1;
  h_intent << 2, 2;
  // z = ReLU([1, 1] + [1, 1] + [0.1, 0.2]) = [2.1, 2.2]; z * w0 = [4.2, -2.2].
  const double a0 = std::exp(4.2) / (std::exp(4.2) + std::exp(-2.2));
  auto r = intent_guided_attention(h_prime, h_intent, p.w1, p.w2, p.bias, p.w0);
  EXPECT_NEAR(r.alpha(0), a0, 1e-12);
  EXPECT_NEAR(r.alpha(1), 1 - a0, 1e-12);
  EXPECT_NEAR(r.output(0), a0, 1e-12);
  EXPECT_NEAR(r.output(1), -(1 - a0), 1e-12);
}

TEST(IntentGuidedAttention, HandComputedPostSoftmax) {
  GateParams p;
  Eigen::RowVectorXd h_prime(2), h_intent(2);
  h_prime << 1, -1;
  h_intent << 2, 2;
  const double s0 = std::exp(2.1) / (std::exp(2.1) + std::exp(2.2));
  auto r = intent_guided_attention(h_prime, h_intent, p.w1, p.w2, p.bias, p.w0, GatePlacement::kPostSoftmax);
  EXPECT_NEAR(r.alpha(0), 2 * s0, 1e-12);
  EXPECT_NEAR(r.alpha(1), -(1 - s0), 1e-12);
  EXPECT_NEAR(r.output(1), 1 - s0, 1e-12);
}

TEST(IntentGuidedAttention, GateIsDistributionAndZeroInputGivesZero) {
  const int d = 6;
  Matrix w1 = random_matrix(d, d, 1), w2 = random_matrix(d, d, 2), b = random_matrix(1, d, 3),
         w0 = random_matrix(1, d, 4);
  Eigen::RowVectorXd hi = random_matrix(1, d, 5).row(0);
  auto r = intent_guided_attention(random_matrix(1, d, 6).row(0), hi, w1, w2, b, w0);
  EXPECT_NEAR(r.alpha.sum(), 1.0, 1e-12);
  auto z = intent_guided_attention(Eigen::RowVectorXd::Zero(d), hi, w1, w2, b, w0);
  EXPECT_EQ(z.output.norm(), 0.0);
}

TEST(FuseAndAggregate, PairSwaps) {
  Matrix s = random_matrix(2, 3, 1), g = random_matrix(2, 3, 2), l = random_matrix(2, 3, 3);
  Matrix fused = s + g + l;
  Matrix out = fuse_and_aggregate(s, g, l, 1);
  EXPECT_TRUE(out.row(0).isApprox(fused.row(1), 1e-12));
  EXPECT_TRUE(out.row(1).isApprox(fused.row(0), 1e-12));
}

TEST(FuseAndAggregate, IdenticalRowsAreFixed) {
  Matrix s = random_matrix(1, 3, 4).replicate(4, 1);
  Matrix zero = Matrix::Zero(4, 3);
  EXPECT_TRUE(fuse_and_aggregate(s, zero, zero, 2).isApprox(s, 1e-12));
}

TEST(FuseAndAggregate, HandComputedWeights) {
  // Unit rows at 0, 60 and 90 degrees; K = 2 uses both neighbours.
  Matrix s(3, 2);
  s << 1, 0,
       0.5, std::sqrt(3.0) / 2,
       0, 2;
  Matrix zero = Matrix::Zero(3, 2);
  Matrix out = fuse_and_aggregate(s, zero, zero, 2);
  const double w1 = std::exp(0.5) / (std::exp(0.5) + std::exp(0.0));
  Eigen::RowVectorXd expected = w1 * s.row(1) + (1 - w1) * s.row(2);
  EXPECT_TRUE(out.row(0).isApprox(expected, 1e-12));
}

TEST(FuseAndAggregate, DropoutOnlyWithRng) {
  Matrix s = random_matrix(5, 8, 5), z = Matrix::Zero(5, 8);
  Matrix eval = fuse_and_aggregate(s, z, z, 2, 0.5, nullptr);
  EXPECT_EQ(eval, fuse_and_aggregate(s, z, z, 2));
  std::mt19937_64 rng(1);
  Matrix train = fuse_and_aggregate(s, z, z, 2, 0.5, &rng);
  int zeros = 0;
  for (Eigen::Index i = 0; i < train.size(); ++i) {
    if (train.data()[i] == 0.0) {
      ++zeros;
    } else {
      EXPECT_NEAR(train.data()[i], 2 * eval.data()[i], 1e-12);
    }
  }
  EXPECT_GT(zeros, 0);
}

TEST(ScoreItems, HandComputedThreeItems) {
  Matrix table(3, 2);
  table << 2, 0,
           0, 3,
           1, 1;
  Eigen::RowVectorXd h(2);
  h << 5, 0;
  Eigen::Vector3d e(std::exp(1.0), std::exp(0.0), std::exp(1.0 / std::sqrt(2.0)));
  Eigen::RowVectorXd p = score_items(h, table);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(p(j), e(j) / e.sum(), 1e-12);

  Eigen::RowVectorXd scaled = score_items(h, table, 12.0);
  Eigen::Vector3d e12(std::exp(12.0), 1.0, std::exp(12.0 / std::sqrt(2.0)));
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(scaled(j), e12(j) / e12.sum(), 1e-12);
}

TEST(ScoreItems, MatchingItemWinsAndSumsToOne) {
  Matrix table = Matrix::Identity(5, 5);
  Eigen::RowVectorXd h = table.row(3);
  Eigen::RowVectorXd p = score_items(h, table, 12.0);
  Eigen::Index best;
  p.maxCoeff(&best);
  EXPECT_EQ(best, 3);
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(ScoreItems, ScaleInvariantRanking) {
  Matrix table = random_matrix(30, 6, 7);
  Eigen::RowVectorXd h = random_matrix(1, 6, 8).row(0);
  Eigen::Index a, b;
  score_items(h, table).maxCoeff(&a);
  score_items(37.5 * h, table).maxCoeff(&b);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(score_items(h, table).isApprox(score_items(0.01 * h, table), 1e-12));
}

TEST(ScoreItems, ZeroSessionThrows) {
  EXPECT_THROW(score_items(Eigen::RowVectorXd::Zero(3), Matrix::Identity(3, 3)), std::invalid_argument);
}

ModelConfig small_config() {
  ModelConfig c;
  c.dim = 8;
  c.num_intents = 2;
  c.top_k = 2;
  c.local_k = 2;
  return c;
}

std::vector<std::vector<ItemId>> sample_sessions() {
  return {{0, 1, 2}, {3, 4}, {1, 5, 1, 6}, {7}, {2, 8, 9}, {4, 3, 0}};
}

TEST(Forward, ProbabilitiesAreDistributions) {
  Model m(small_config(), 10, std::nullopt, 3);
  SessionForward f = forward_values(m, prepare_batch(sample_sessions(), m.config()));
  ASSERT_EQ(f.probs.rows(), 6);
  ASSERT_EQ(f.probs.cols(), 10);
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(f.probs.row(i).sum(), 1.0, 1e-6);
  EXPECT_TRUE(f.probs.allFinite());
}

TEST(Forward, PermutationConsistency) {
  Model m(small_config(), 10, std::nullopt, 4);
  auto sessions = sample_sessions();
  std::vector<int> perm = {4, 2, 0, 5, 1, 3};
  std::vector<std::vector<ItemId>> permuted;
  for (int i : perm) permuted.push_back(sessions[i]);
  SessionForward a = forward_values(m, prepare_batch(sessions, m.config()));
  SessionForward b = forward_values(m, prepare_batch(permuted, m.config()));
  for (size_t r = 0; r < perm.size(); ++r) {
    EXPECT_TRUE(b.probs.row(r).isApprox(a.probs.row(perm[r]), 1e-10)) << "row " << r;
    EXPECT_TRUE(b.h_similarity.row(r).isApprox(a.h_similarity.row(perm[r]), 1e-10)) << "row " << r;
  }
}

TEST(Forward, AblationsChangeTheGraph) {
  ModelConfig c = small_config();
  auto sessions = sample_sessions();
  Model full(c, 10, std::nullopt, 5);
  c.global_sim = c.local_sim = false;
  Model no_inter(c, 10, std::nullopt, 5);
  SessionForward a = forward_values(full, prepare_batch(sessions, full.config()));
  SessionForward b = forward_values(no_inter, prepare_batch(sessions, no_inter.config()));
  EXPECT_FALSE(a.probs.isApprox(b.probs));
  EXPECT_TRUE(b.h_g.isZero());
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(b.probs.row(i).sum(), 1.0, 1e-6);
}

TEST(ModelConfig, JsonRoundTripAndUnknownKeys) {
  ModelConfig c = small_config();
  c.gate = GatePlacement::kPostSoftmax;
  c.tie_denoise = false;
  ModelConfig d = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(d), to_json(c));
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"dimm", 3}}), std::exception);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"dim", 0}}), std::exception);
}

TEST(Model, UntiedDenoiseHasSeparateParameters) {
  ModelConfig c = small_config();
  EXPECT_EQ(Model(c, 10, std::nullopt, 1).params().count("denoise_local.w1"), 0u);
  c.tie_denoise = false;
  EXPECT_EQ(Model(c, 10, std::nullopt, 1).params().count("denoise_local.w1"), 1u);
}

TEST(Model, CheckpointRoundTrip) {
  testing::TempDir dir("ckpt");
  ModelConfig c = small_config();
  c.use_semantic = true;
  ItemCatalog catalog;
  for (int i = 0; i < 10; ++i) catalog.add("i" + std::to_string(i));
  catalog.metadata.assign(10, std::nullopt);
  catalog.metadata[2] = ItemMetadata{"Two", "", "Cat"};
  catalog.metadata[7] = ItemMetadata{"Seven", "", ""};
  MockProvider provider(16, 7);
  Model m(c, 10, build_semantic_table(catalog, provider, {}), 9);
  // f32 blobs: start from values that are exact in single precision.
  for (auto& [name, value] : m.params()) value = value.cast<float>().cast<double>();
  m.save(dir.path() / "ckpt");
  Model back = Model::load(dir.path() / "ckpt");
  EXPECT_EQ(to_json(back.config()), to_json(m.config()));
  ASSERT_EQ(back.params().size(), m.params().size());
  for (const auto& [name, value] : m.params()) EXPECT_EQ(back.param(name), value) << name;
  auto batch = prepare_batch(sample_sessions(), c);
  EXPECT_EQ(forward_values(back, batch).probs, forward_values(m, batch).probs);
  EXPECT_THROW(Model::load(dir.path() / "missing"), std::exception);
}

TEST(Model, SemanticRowsComeFromProjector) {
  ModelConfig c = small_config();
  c.use_semantic = true;
  ItemCatalog catalog;
  for (int i = 0; i < 4; ++i) catalog.add("i" + std::to_string(i));
  catalog.metadata.assign(4, std::nullopt);
  catalog.metadata[1] = ItemMetadata{"One", "", ""};
  MockProvider provider(16, 7);
  Model m(c, 4, build_semantic_table(catalog, provider, {}), 2);
  Matrix table = m.item_table();
  SpaceProjector p{m.param("projector.w1"), m.param("projector.b1"), m.param("projector.w2"),
                   m.param("projector.b2")};
  EXPECT_TRUE(table.row(1).isApprox(p.project(m.semantic()->raw).row(0)));
  EXPECT_EQ(table.row(0), m.param("item_embedding").row(0));
}

}  // namespace
}  // namespace hiphop
