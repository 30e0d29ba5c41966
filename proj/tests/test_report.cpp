#include "expandr/report.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "support/oracles.hpp"

using namespace expandr::report;
using expandr::numerics::Rng;
using expandr::numerics::Vec;

TEST(Bleu, IdenticalTextsScoreOne) {
  EXPECT_NEAR(bleu_similarity("flu season peaks in winter", "flu season peaks in winter"),
              1.0, 1e-12);
}

TEST(Bleu, HandUnigramCount) {
  EXPECT_NEAR(bleu_similarity("a b c", "a b d", 1), 2.0 / 3.0, 1e-12);
}

TEST(Bleu, DisjointLongTextsStayNearZero) {
  std::string cand;
  std::string ref;
  for (int i = 0; i < 25; ++i) {
    cand += " left" + std::to_string(i);
    ref += " right" + std::to_string(i);
  }
  const double score = bleu_similarity(cand, ref);
  EXPECT_GT(score, 0.0);
  EXPECT_LT(score, 0.1);
}

TEST(Bleu, EmptyReferenceWarnsAndScoresZero) {
  int warnings = 0;
  EXPECT_DOUBLE_EQ(bleu_similarity("something", "", 2, &warnings), 0.0);
  EXPECT_EQ(warnings, 1);
}

TEST(Bleu, EmptyCandidateScoresZero) {
  EXPECT_DOUBLE_EQ(bleu_similarity("", "reference text"), 0.0);
}

TEST(Bleu, BoundedOnRandomTexts) {
  Rng rng(9);
  const std::vector<std::string> words = {"alpha", "beta", "gamma", "delta", "eps"};
  for (int round = 0; round < 100; ++round) {
    std::string cand;
    std::string ref;
    const std::size_t nc = 1 + rng.below(12);
    const std::size_t nr = 1 + rng.below(12);
    for (std::size_t i = 0; i < nc; ++i) cand += words[rng.below(words.size())] + " ";
    for (std::size_t i = 0; i < nr; ++i) ref += words[rng.below(words.size())] + " ";
    const double score = bleu_similarity(cand, ref);
    EXPECT_GE(score, 0.0);
    EXPECT_LE(score, 1.0);
  }
}

TEST(Bleu, BrevityPenaltyAppliesToShortCandidates) {
  const double short_cand = bleu_similarity("a b", "a b c d e f");
  const double full_cand = bleu_similarity("a b c d e f", "a b c d e f");
  EXPECT_LT(short_cand, full_cand);
}

TEST(LengthStats, MeanWhitespaceTokens) {
  const auto stats = length_stats({{"m", {"a b", "a b c d"}}});
  EXPECT_DOUBLE_EQ(stats.at("m").value(), 3.0);
}

TEST(LengthStats, EmptyVariantReportsAbsent) {
  const auto stats = length_stats({{"empty", {}}, {"one", {"t1 t2 t3 t4 t5"}}});
  EXPECT_FALSE(stats.at("empty").has_value());
  EXPECT_DOUBLE_EQ(stats.at("one").value(), 5.0);
}

TEST(Project2d, TwoDimensionalInputPreservesPairwiseDistances) {
  Rng rng(10);
  std::vector<Vec> points;
  for (int i = 0; i < 12; ++i) {
    points.push_back({rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)});
  }
  // Center exactly.
  Vec mean(2, 0.0);
  for (const auto& p : points) {
    mean[0] += p[0];
    mean[1] += p[1];
  }
  for (auto& m : mean) m /= points.size();
  for (auto& p : points) {
    p[0] -= mean[0];
    p[1] -= mean[1];
  }
  const auto projection = project_2d(points);
  for (std::size_t a = 0; a < points.size(); ++a) {
    for (std::size_t b = a + 1; b < points.size(); ++b) {
      const double orig = std::hypot(points[a][0] - points[b][0],
                                     points[a][1] - points[b][1]);
      const double proj = std::hypot(projection.points[a][0] - projection.points[b][0],
                                     projection.points[a][1] - projection.points[b][1]);
      EXPECT_NEAR(orig, proj, 1e-9);
    }
  }
}

TEST(Project2d, IdenticalVectorsProjectToOrigin) {
  const std::vector<Vec> points(5, Vec{1.0, 2.0, 3.0});
  const auto projection = project_2d(points);
  EXPECT_TRUE(projection.rank_deficient);
  for (const auto& p : projection.points) {
    EXPECT_DOUBLE_EQ(p[0], 0.0);
    EXPECT_DOUBLE_EQ(p[1], 0.0);
  }
}

TEST(Project2d, RankOneInputZerosSecondCoordinate) {
  std::vector<Vec> points;
  for (int i = 0; i < 6; ++i) {
    points.push_back({static_cast<double>(i), 2.0 * i, -1.0 * i});
  }
  const auto projection = project_2d(points);
  EXPECT_TRUE(projection.rank_deficient);
  for (const auto& p : projection.points) EXPECT_NEAR(p[1], 0.0, 1e-9);
}

TEST(Project2d, ReconstructionMatchesEigensolverOracle) {
  Rng rng(11);
  const std::size_t n = 10;
  const std::size_t d = 8;
  std::vector<Vec> points(n, Vec(d));
  for (auto& p : points) {
    for (auto& x : p) x = rng.uniform(-1.0, 1.0);
  }
  Vec mean(d, 0.0);
  for (const auto& p : points) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += p[j];
  }
  for (auto& m : mean) m /= n;
  std::vector<double> cov(d * d, 0.0);
  for (const auto& p : points) {
    for (std::size_t a = 0; a < d; ++a) {
      for (std::size_t b = 0; b < d; ++b) {
        cov[a * d + b] += (p[a] - mean[a]) * (p[b] - mean[b]);
      }
    }
  }
  for (auto& x : cov) x /= n;

  std::vector<double> eigvals;
  std::vector<Vec> eigvecs;
  oracles::jacobi_eigen(cov, d, eigvals, eigvecs);
  // Rank-2 reconstruction error equals the trailing eigenvalue mass.
  double oracle_error = 0.0;
  for (std::size_t i = 2; i < d; ++i) oracle_error += eigvals[i];
  oracle_error *= static_cast<double>(n);

  const auto projection = project_2d(points);
  double kept = 0.0;
  for (const auto& p : projection.points) kept += p[0] * p[0] + p[1] * p[1];
  double total = 0.0;
  for (const auto& p : points) {
    for (std::size_t j = 0; j < d; ++j) {
      total += (p[j] - mean[j]) * (p[j] - mean[j]);
    }
  }
  EXPECT_NEAR(total - kept, oracle_error, 1e-6);
}

TEST(Project2d, TranslationInvariance) {
  Rng rng(12);
  std::vector<Vec> points(8, Vec(5));
  for (auto& p : points) {
    for (auto& x : p) x = rng.uniform(-1.0, 1.0);
  }
  std::vector<Vec> shifted = points;
  for (auto& p : shifted) {
    for (std::size_t j = 0; j < p.size(); ++j) p[j] += 3.5;
  }
  const auto a = project_2d(points);
  const auto b = project_2d(shifted);
  for (std::size_t i = 0; i < points.size(); ++i) {
    EXPECT_NEAR(a.points[i][0], b.points[i][0], 1e-9);
    EXPECT_NEAR(a.points[i][1], b.points[i][1], 1e-9);
  }
}

TEST(Project2d, SignConvention) {
  // First direction's first nonzero coordinate is positive, so the dominant
  // axis keeps a stable orientation.
  std::vector<Vec> points;
  for (int i = -3; i <= 3; ++i) points.push_back({static_cast<double>(i), 0.0});
  const auto projection = project_2d(points);
  EXPECT_GT(projection.points.back()[0], 0.0);  // x=+3 lands on the positive side
}

TEST(Project2d, NeedsTwoVectors) {
  EXPECT_THROW(project_2d({Vec{1.0, 2.0}}), std::invalid_argument);
}
