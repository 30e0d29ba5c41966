#include "expandr/fusion.hpp"

#include <gtest/gtest.h>

#include "expandr/retriever.hpp"

using namespace expandr::fusion;
using expandr::numerics::Matrix;
using expandr::numerics::Rng;
using expandr::numerics::Vec;

TEST(Fuse, ElementWiseMean) {
  EXPECT_EQ(fuse({1.0, 0.0}, {0.0, 1.0}), (Vec{0.5, 0.5}));
  EXPECT_EQ(fuse({0.2, 0.8}, {0.6, 0.0}), (Vec{0.4, 0.4}));
}

TEST(Fuse, ExpansionEqualToRawIsIdentity) {
  const Vec raw = {0.3, -1.2, 4.0};
  EXPECT_EQ(fuse(raw, raw), raw);
}

TEST(Fuse, DimMismatchThrows) {
  EXPECT_THROW(fuse({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST(Fuse, Linearity) {
  Rng rng(4);
  for (int round = 0; round < 20; ++round) {
    Vec a(5);
    Vec b(5);
    for (auto& x : a) x = rng.uniform(-2.0, 2.0);
    for (auto& x : b) x = rng.uniform(-2.0, 2.0);
    const double c = rng.uniform(-3.0, 3.0);
    Vec ca = a;
    Vec cb = b;
    for (auto& x : ca) x *= c;
    for (auto& x : cb) x *= c;
    const Vec lhs = fuse(ca, cb);
    const Vec rhs = fuse(a, b);
    for (std::size_t i = 0; i < lhs.size(); ++i) {
      EXPECT_NEAR(lhs[i], c * rhs[i], 1e-12);
    }
  }
}

TEST(Fuse, NormalizeInputsFlag) {
  const Vec fused = fuse({2.0, 0.0}, {0.0, 4.0}, /*normalize_inputs=*/true);
  EXPECT_DOUBLE_EQ(fused[0], 0.5);
  EXPECT_DOUBLE_EQ(fused[1], 0.5);
}

// Retrieval with a fused vector equals retrieval with the raw vector when
// the expansion embedding is identical to the raw embedding.
TEST(Fuse, FusionIdentityPreservesRankedList) {
  Rng rng(12);
  Matrix m(15, 3);
  for (auto& x : m.data) x = rng.uniform(-1.0, 1.0);
  std::vector<std::string> ids;
  for (int i = 0; i < 15; ++i) ids.push_back("d" + std::to_string(i));
  const auto index = expandr::retriever::build_index(std::move(ids), std::move(m));
  Vec raw(3);
  for (auto& x : raw) x = rng.uniform(-1.0, 1.0);
  const auto run_raw = expandr::retriever::search(index, raw, 15, "q");
  const auto run_fused = expandr::retriever::search(index, fuse(raw, raw), 15, "q");
  ASSERT_EQ(run_raw.entries.size(), run_fused.entries.size());
  for (std::size_t i = 0; i < run_raw.entries.size(); ++i) {
    EXPECT_EQ(run_raw.entries[i].first, run_fused.entries[i].first);
    EXPECT_DOUBLE_EQ(run_raw.entries[i].second, run_fused.entries[i].second);
  }
}

TEST(JointLoglik, SumsComponents) {
  EXPECT_DOUBLE_EQ(joint_loglik(-1.0, -2.0), -3.0);
  EXPECT_DOUBLE_EQ(joint_loglik(0.0, 0.0), 0.0);
  // 4-doc softmax with equal sims contributes -ln 4; generation -0.5.
  EXPECT_NEAR(joint_loglik(-std::log(4.0), -0.5), -1.8862943611198906, 1e-12);
}

TEST(JointLoglik, RejectsPositiveOrNonFinite) {
  EXPECT_THROW(joint_loglik(0.1, -1.0), std::invalid_argument);
  EXPECT_THROW(joint_loglik(-1.0, 0.1), std::invalid_argument);
  EXPECT_THROW(joint_loglik(std::nan(""), -1.0), std::invalid_argument);
}
