#include "expandr/contrastive.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"

using namespace expandr::contrastive;
using expandr::encoder::DualEncoderParams;
using expandr::encoder::init_params;
using expandr::numerics::Rng;
using expandr::numerics::Vec;

namespace {

std::vector<TrainRow> random_batch(Rng& rng, std::size_t b, std::size_t v) {
  std::vector<TrainRow> batch(b);
  for (auto& row : batch) {
    row.query_tokens.resize(1 + rng.below(3));
    row.expansion_tokens.resize(1 + rng.below(3));
    row.doc_tokens.resize(1 + rng.below(3));
    for (auto& t : row.query_tokens) t = static_cast<int>(rng.below(v));
    for (auto& t : row.expansion_tokens) t = static_cast<int>(rng.below(v));
    for (auto& t : row.doc_tokens) t = static_cast<int>(rng.below(v));
  }
  return batch;
}

}  // namespace

TEST(InfonceLoss, AllEqualSimsGiveLnB) {
  // Zero query tables make every similarity zero.
  for (std::size_t b : {2u, 4u, 8u}) {
    DualEncoderParams params = init_params(6, 4, false, 1, 0.3);
    for (auto& x : params.query_table.data) x = 0.0;
    std::vector<TrainRow> batch(b);
    Rng rng(b);
    for (auto& row : batch) {
      row.query_tokens = {static_cast<int>(rng.below(6))};
      row.expansion_tokens = {static_cast<int>(rng.below(6))};
      row.doc_tokens = {static_cast<int>(rng.below(6))};
    }
    EXPECT_NEAR(infonce_loss(params, batch, true), std::log(static_cast<double>(b)),
                1e-12);
    EXPECT_NEAR(infonce_loss(params, batch, false), std::log(static_cast<double>(b)),
                1e-12);
  }
}

TEST(InfonceLoss, CalculatorValueTwoRows) {
  // Positive sim 1 and negative sim 0 for both rows:
  // query i = e_i (one-hot), doc j = e_j, no fusion.
  DualEncoderParams params;
  params.tied = false;
  params.query_table = expandr::numerics::Matrix(2, 2);
  params.doc_table = expandr::numerics::Matrix(2, 2);
  params.query_table.row(0)[0] = 1.0;
  params.query_table.row(1)[1] = 1.0;
  params.doc_table.row(0)[0] = 1.0;
  params.doc_table.row(1)[1] = 1.0;
  std::vector<TrainRow> batch = {
      {{0}, {}, {0}},
      {{1}, {}, {1}},
  };
  EXPECT_NEAR(infonce_loss(params, batch, false), 0.3132616875182228, 1e-12);
}

TEST(InfonceLoss, PositiveDominationBeatsUniform) {
  // Orthonormal one-hot setup: each fused query equals its positive doc.
  const std::size_t b = 4;
  DualEncoderParams params;
  params.tied = true;
  params.query_table = expandr::numerics::Matrix(b, b);
  for (std::size_t i = 0; i < b; ++i) params.query_table.row(i)[i] = 1.0;
  std::vector<TrainRow> batch;
  for (std::size_t i = 0; i < b; ++i) {
    TrainRow row;
    row.query_tokens = {static_cast<int>(i)};
    row.expansion_tokens = {static_cast<int>(i)};
    row.doc_tokens = {static_cast<int>(i)};
    batch.push_back(row);
  }
  EXPECT_LT(infonce_loss(params, batch, true), std::log(static_cast<double>(b)));
}

TEST(InfonceLoss, BatchOfOneRejected) {
  DualEncoderParams params = init_params(4, 2, false, 2, 0.3);
  std::vector<TrainRow> batch = {{{0}, {1}, {2}}};
  EXPECT_THROW(infonce_loss(params, batch, true), std::invalid_argument);
}

TEST(InfonceGrad, MatchesFiniteDifferences) {
  Rng rng(33);
  for (int round = 0; round < 12; ++round) {
    const std::size_t v = 4 + rng.below(6);
    const std::size_t d = 2 + rng.below(4);
    const std::size_t b = 2 + rng.below(3);
    const bool tied = rng.below(2) == 0;
    const bool use_fusion = rng.below(2) == 0;
    DualEncoderParams params = init_params(v, d, tied, 40 + round, 0.4);
    const auto batch = random_batch(rng, b, v);
    const auto grads = infonce_grad(params, batch, use_fusion);
    Vec analytic = grads.query.data;
    if (!tied) {
      analytic.insert(analytic.end(), grads.doc.data.begin(), grads.doc.data.end());
    }
    const auto f = [&](const Vec& flat) {
      return infonce_loss(oracles::unflatten_params(flat, params), batch, use_fusion);
    };
    const Vec numeric =
        expandr::numerics::finite_diff_grad(f, oracles::flatten_params(params), 1e-6);
    EXPECT_LT(oracles::gradcheck_violation(analytic, numeric), 1.0);
  }
}

TEST(InfonceGrad, UntouchedTokenRowsStayZero) {
  DualEncoderParams params = init_params(10, 3, false, 3, 0.3);
  std::vector<TrainRow> batch = {
      {{0}, {1}, {2}},
      {{3}, {4}, {5}},
  };
  const auto grads = infonce_grad(params, batch, true);
  for (std::size_t tok : {6u, 7u, 8u, 9u}) {
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_DOUBLE_EQ(grads.query.row(tok)[j], 0.0);
      EXPECT_DOUBLE_EQ(grads.doc.row(tok)[j], 0.0);
    }
  }
  // Doc-only tokens never touch the query table and vice versa.
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_DOUBLE_EQ(grads.query.row(2)[j], 0.0);
    EXPECT_DOUBLE_EQ(grads.doc.row(0)[j], 0.0);
  }
}

TEST(InfonceGrad, FusionIdentityMatchesNoFusion) {
  // Expansion tokens identical to query tokens: fused vector equals the raw
  // query vector, so loss and query-table gradient agree with no-fusion.
  DualEncoderParams params = init_params(8, 3, false, 4, 0.4);
  std::vector<TrainRow> batch = {
      {{1, 2}, {1, 2}, {5}},
      {{3}, {3}, {6}},
  };
  EXPECT_NEAR(infonce_loss(params, batch, true), infonce_loss(params, batch, false), 1e-14);
  const auto fused = infonce_grad(params, batch, true);
  const auto plain = infonce_grad(params, batch, false);
  for (std::size_t i = 0; i < fused.query.data.size(); ++i) {
    EXPECT_NEAR(fused.query.data[i], plain.query.data[i], 1e-14);
  }
  for (std::size_t i = 0; i < fused.doc.data.size(); ++i) {
    EXPECT_NEAR(fused.doc.data[i], plain.doc.data[i], 1e-14);
  }
}

TEST(TrainRetriever, ZeroEpochsLeavesParamsUnchanged) {
  DualEncoderParams params = init_params(6, 3, false, 5, 0.3);
  Rng rng(50);
  const auto dataset = random_batch(rng, 6, 6);
  TrainConfig config;
  config.batch_size = 3;
  config.epochs = 0;
  const auto result = train_retriever(params, dataset, config);
  EXPECT_EQ(result.params.query_table.data, params.query_table.data);
  EXPECT_EQ(result.params.doc_table.data, params.doc_table.data);
  EXPECT_TRUE(result.epoch_mean_loss.empty());
}

TEST(TrainRetriever, LossDecreasesOnSeparableData) {
  // One-hot queries and docs aligned by topic, unique tokens per row.
  DualEncoderParams params = init_params(24, 8, false, 6, 0.2);
  std::vector<TrainRow> dataset;
  for (int i = 0; i < 12; ++i) {
    TrainRow row;
    row.query_tokens = {i};
    row.expansion_tokens = {i};
    row.doc_tokens = {12 + i};
    dataset.push_back(row);
  }
  TrainConfig config;
  config.batch_size = 4;
  config.epochs = 5;
  config.learning_rate = 0.5;
  config.seed = 9;
  const auto result = train_retriever(params, dataset, config);
  ASSERT_EQ(result.epoch_mean_loss.size(), 5u);
  EXPECT_LT(result.epoch_mean_loss.back(), result.epoch_mean_loss.front());
}

TEST(TrainRetriever, SameSeedGivesBitIdenticalParams) {
  DualEncoderParams params = init_params(10, 4, false, 7, 0.3);
  Rng rng(60);
  const auto dataset = random_batch(rng, 9, 10);
  TrainConfig config;
  config.batch_size = 4;
  config.epochs = 3;
  config.seed = 1234;
  const auto a = train_retriever(params, dataset, config);
  const auto b = train_retriever(params, dataset, config);
  EXPECT_EQ(a.params.query_table.data, b.params.query_table.data);
  EXPECT_EQ(a.params.doc_table.data, b.params.doc_table.data);
  EXPECT_EQ(a.epoch_mean_loss, b.epoch_mean_loss);
}

TEST(TrainRetriever, RejectsBadInputs) {
  DualEncoderParams params = init_params(4, 2, false, 8, 0.3);
  TrainConfig config;
  EXPECT_THROW(train_retriever(params, {}, config), std::invalid_argument);
  Rng rng(70);
  const auto dataset = random_batch(rng, 4, 4);
  config.batch_size = 1;
  EXPECT_THROW(train_retriever(params, dataset, config), std::invalid_argument);
}
