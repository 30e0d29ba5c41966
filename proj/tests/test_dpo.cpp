#include "expandr/dpo.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace expandr::dpo;
using expandr::expansion::make_policy_entry;
using expandr::expansion::PolicyEntry;
using expandr::expansion::ToyPolicy;
using expandr::numerics::Rng;
using expandr::numerics::Vec;
using expandr::reward::RewardRecord;

namespace {

std::map<std::string, std::vector<RewardRecord>> one_query_rewards(
    const std::string& qid, const std::vector<double>& totals) {
  std::map<std::string, std::vector<RewardRecord>> rewards;
  for (std::size_t i = 0; i < totals.size(); ++i) {
    RewardRecord r;
    r.query_id = qid;
    r.candidate_index = static_cast<int>(i);
    r.r_total = totals[i];
    rewards[qid].push_back(r);
  }
  return rewards;
}

std::map<std::string, std::vector<std::string>> texts_for(const std::string& qid,
                                                          std::size_t k) {
  std::vector<std::string> texts;
  for (std::size_t i = 0; i < k; ++i) texts.push_back(qid + "-cand" + std::to_string(i));
  return {{qid, texts}};
}

PreferencePair pair_for(const std::string& qid, int chosen, int rejected) {
  PreferencePair p;
  p.query_id = qid;
  p.chosen_index = chosen;
  p.rejected_index = rejected;
  p.reward_chosen = 1.0;
  p.reward_rejected = 0.5;
  return p;
}

}  // namespace

TEST(BuildPairs, MaxMinPicksArgmaxArgmin) {
  DpoConfig config;
  const auto result =
      build_pairs(one_query_rewards("q", {1.5, 0.9, 0.4}), texts_for("q", 3), config);
  ASSERT_EQ(result.pairs.size(), 1u);
  EXPECT_EQ(result.pairs[0].chosen_index, 0);
  EXPECT_EQ(result.pairs[0].rejected_index, 2);
  EXPECT_EQ(result.pairs[0].chosen_text, "q-cand0");
  EXPECT_DOUBLE_EQ(result.pairs[0].reward_chosen, 1.5);
}

TEST(BuildPairs, EqualRewardsEmitNothing) {
  DpoConfig config;
  const auto result =
      build_pairs(one_query_rewards("q", {1.0, 1.0}), texts_for("q", 2), config);
  EXPECT_TRUE(result.pairs.empty());
}

TEST(BuildPairs, AllAboveMarginEnumeratesOrderedPairs) {
  DpoConfig config;
  config.strategy = PairStrategy::kAllAboveMargin;
  config.margin = 0.6;
  const auto result =
      build_pairs(one_query_rewards("q", {2.0, 1.0, 0.5}), texts_for("q", 3), config);
  ASSERT_EQ(result.pairs.size(), 2u);
  EXPECT_EQ(result.pairs[0].chosen_index, 0);
  EXPECT_EQ(result.pairs[0].rejected_index, 1);
  EXPECT_EQ(result.pairs[1].chosen_index, 0);
  EXPECT_EQ(result.pairs[1].rejected_index, 2);
}

TEST(BuildPairs, TooFewCandidatesSkippedWithCounter) {
  DpoConfig config;
  auto rewards = one_query_rewards("q1", {1.0});
  const auto more = one_query_rewards("q2", {1.0, 0.2});
  rewards.insert(more.begin(), more.end());
  auto texts = texts_for("q1", 1);
  const auto t2 = texts_for("q2", 2);
  texts.insert(t2.begin(), t2.end());
  const auto result = build_pairs(rewards, texts, config);
  EXPECT_EQ(result.skipped_queries, 1);
  EXPECT_EQ(result.pairs.size(), 1u);
}

TEST(BuildPairs, MaxMinTieBreaksByAscendingIndex) {
  DpoConfig config;
  const auto result =
      build_pairs(one_query_rewards("q", {1.0, 1.0, 0.2, 0.2}), texts_for("q", 4), config);
  ASSERT_EQ(result.pairs.size(), 1u);
  EXPECT_EQ(result.pairs[0].chosen_index, 0);
  EXPECT_EQ(result.pairs[0].rejected_index, 2);
}

TEST(BuildPairs, DeterministicGivenIdenticalInputs) {
  Rng rng(31);
  std::map<std::string, std::vector<RewardRecord>> rewards;
  std::map<std::string, std::vector<std::string>> texts;
  for (int qi = 0; qi < 20; ++qi) {
    const std::string qid = "q" + std::to_string(qi);
    std::vector<double> totals(5);
    for (auto& t : totals) t = rng.uniform(0.0, 2.0);
    const auto r = one_query_rewards(qid, totals);
    rewards.insert(r.begin(), r.end());
    const auto t = texts_for(qid, 5);
    texts.insert(t.begin(), t.end());
  }
  DpoConfig config;
  config.strategy = PairStrategy::kAllAboveMargin;
  config.margin = 0.3;
  const auto a = build_pairs(rewards, texts, config);
  const auto b = build_pairs(rewards, texts, config);
  ASSERT_EQ(a.pairs.size(), b.pairs.size());
  for (std::size_t i = 0; i < a.pairs.size(); ++i) {
    EXPECT_EQ(a.pairs[i].query_id, b.pairs[i].query_id);
    EXPECT_EQ(a.pairs[i].chosen_index, b.pairs[i].chosen_index);
    EXPECT_EQ(a.pairs[i].rejected_index, b.pairs[i].rejected_index);
  }
}

TEST(DpoLoss, PolicyEqualsReferenceGivesLn2) {
  for (double beta : {0.01, 0.1, 1.0, 7.3}) {
    auto entry = make_policy_entry({"a", "b", "c"});
    entry.logits = {0.4, -1.0, 2.0};
    entry.ref_logits = entry.logits;
    EXPECT_NEAR(dpo_loss(entry, pair_for("q", 0, 2), beta), std::log(2.0), 1e-12);
  }
}

TEST(DpoLoss, CalculatorValueAtDifferenceTwo) {
  // Log-ratio difference of exactly 2 at beta=1.
  auto entry = make_policy_entry({"a", "b"});
  entry.logits = {2.0, 0.0};
  entry.ref_logits = {0.0, 0.0};
  // (lp( a ) - lpref( a )) - (lp( b ) - lpref( b )) = logits gap change = 2.
  EXPECT_NEAR(dpo_loss(entry, pair_for("q", 0, 1), 1.0), 0.12692801104297263, 1e-12);
}

TEST(DpoLoss, BetaScalesTheArgument) {
  auto entry1 = make_policy_entry({"a", "b"});
  entry1.logits = {1.0, 0.0};
  entry1.ref_logits = {0.0, 0.0};
  auto entry2 = make_policy_entry({"a", "b"});
  entry2.logits = {2.0, 0.0};
  entry2.ref_logits = {0.0, 0.0};
  EXPECT_NEAR(dpo_loss(entry1, pair_for("q", 0, 1), 2.0),
              dpo_loss(entry2, pair_for("q", 0, 1), 1.0), 1e-12);
}

TEST(DpoLoss, NonNegativeAndLn2OnlyAtZeroDifference) {
  Rng rng(14);
  for (int round = 0; round < 100; ++round) {
    const std::size_t k = 2 + rng.below(7);
    auto entry = make_policy_entry(std::vector<std::string>(k, "t"));
    for (auto& z : entry.logits) z = rng.uniform(-3.0, 3.0);
    for (auto& z : entry.ref_logits) z = rng.uniform(-3.0, 3.0);
    const int chosen = static_cast<int>(rng.below(k));
    int rejected = static_cast<int>(rng.below(k));
    if (rejected == chosen) rejected = (rejected + 1) % static_cast<int>(k);
    const double loss = dpo_loss(entry, pair_for("q", chosen, rejected), 0.7);
    EXPECT_GE(loss, 0.0);
  }
}

TEST(DpoLoss, InvariantUnderConstantLogitShift) {
  Rng rng(15);
  for (int round = 0; round < 50; ++round) {
    auto entry = make_policy_entry({"a", "b", "c", "d"});
    for (auto& z : entry.logits) z = rng.uniform(-2.0, 2.0);
    for (auto& z : entry.ref_logits) z = rng.uniform(-2.0, 2.0);
    auto shifted = entry;
    const double c = rng.uniform(-50.0, 50.0);
    for (auto& z : shifted.logits) z += c;
    const auto pair = pair_for("q", 1, 3);
    EXPECT_NEAR(dpo_loss(entry, pair, 0.3), dpo_loss(shifted, pair, 0.3), 1e-10);
  }
}

TEST(DpoGrad, MatchesFiniteDifferences) {
  Rng rng(16);
  for (int round = 0; round < 100; ++round) {
    const std::size_t k = 2 + rng.below(7);
    auto entry = make_policy_entry(std::vector<std::string>(k, "t"));
    for (auto& z : entry.logits) z = rng.uniform(-2.0, 2.0);
    for (auto& z : entry.ref_logits) z = rng.uniform(-2.0, 2.0);
    const int chosen = static_cast<int>(rng.below(k));
    int rejected = static_cast<int>(rng.below(k));
    if (rejected == chosen) rejected = (rejected + 1) % static_cast<int>(k);
    const auto pair = pair_for("q", chosen, rejected);
    const double beta = rng.uniform(0.05, 2.0);
    const Vec analytic = dpo_grad(entry, pair, beta);
    const auto f = [&](const Vec& logits) {
      auto probe = entry;
      probe.logits = logits;
      return dpo_loss(probe, pair, beta);
    };
    const Vec numeric = expandr::numerics::finite_diff_grad(f, entry.logits, 1e-6);
    EXPECT_LT(oracles::gradcheck_violation(analytic, numeric), 1.0);
  }
}

TEST(DpoGrad, SignPushesChosenUpRejectedDown) {
  auto entry = make_policy_entry({"a", "b", "c"});
  const auto grad = dpo_grad(entry, pair_for("q", 0, 2), 0.5);
  EXPECT_LT(grad[0], 0.0);  // descent raises the chosen logit
  EXPECT_GT(grad[2], 0.0);
  EXPECT_DOUBLE_EQ(grad[1], 0.0);
}

TEST(DpoGrad, ComponentsSumToZero) {
  auto entry = make_policy_entry({"a", "b"});
  entry.logits = {0.7, -0.3};
  const auto grad = dpo_grad(entry, pair_for("q", 0, 1), 1.3);
  EXPECT_NEAR(grad[0] + grad[1], 0.0, 1e-15);
}

TEST(TrainDpo, SinglePairConverges) {
  ToyPolicy policy;
  policy.by_query.emplace("q", make_policy_entry({"good", "bad"}));
  DpoConfig config;
  config.epochs = 100;
  config.learning_rate = 0.5;
  const auto pair = pair_for("q", 0, 1);
  train_dpo(policy, {pair}, config, Rng(1));
  const auto& entry = policy.by_query.at("q");
  EXPECT_GT(entry.logits[0], entry.logits[1]);
  EXPECT_EQ(entry.ref_logits, Vec(2, 0.0));  // reference untouched
}

TEST(TrainDpo, ZeroEpochsLeavesPolicyBitIdentical) {
  ToyPolicy policy;
  auto entry = make_policy_entry({"a", "b", "c"});
  entry.logits = {0.25, -1.5, 0.75};
  policy.by_query.emplace("q", entry);
  DpoConfig config;
  config.epochs = 0;
  const auto trace = train_dpo(policy, {pair_for("q", 0, 1)}, config, Rng(2));
  EXPECT_TRUE(trace.epoch_mean_loss.empty());
  EXPECT_EQ(policy.by_query.at("q").logits, entry.logits);
}

TEST(TrainDpo, EmptyPairsRejected) {
  ToyPolicy policy;
  DpoConfig config;
  EXPECT_THROW(train_dpo(policy, {}, config, Rng(3)), std::invalid_argument);
}

TEST(TrainDpo, SyntheticSuiteReachesHighAccuracy) {
  // 50 queries, K=8, consistent rewards, max_min pairs.
  ToyPolicy policy;
  std::map<std::string, std::vector<RewardRecord>> rewards;
  std::map<std::string, std::vector<std::string>> texts;
  Rng rng(20);
  for (int qi = 0; qi < 50; ++qi) {
    const std::string qid = "q" + std::to_string(qi);
    std::vector<std::string> cand_texts;
    for (int k = 0; k < 8; ++k) cand_texts.push_back(qid + "c" + std::to_string(k));
    policy.by_query.emplace(qid, make_policy_entry(cand_texts));
    std::vector<double> totals(8);
    for (auto& t : totals) t = rng.uniform(0.0, 2.0);
    for (std::size_t i = 0; i < 8; ++i) {
      RewardRecord r;
      r.query_id = qid;
      r.candidate_index = static_cast<int>(i);
      r.r_total = totals[i];
      rewards[qid].push_back(r);
    }
    texts[qid] = cand_texts;
  }
  DpoConfig config;
  config.epochs = 200;
  config.learning_rate = 0.5;
  const auto built = build_pairs(rewards, texts, config);
  ASSERT_GE(built.pairs.size(), 45u);
  const double before = pair_accuracy(policy, built.pairs);
  const auto result = train_dpo(policy, built.pairs, config, Rng(21));
  const double after = pair_accuracy(policy, built.pairs);
  EXPECT_GE(after, 0.95);
  EXPECT_GT(after, before);
  // Epoch-mean loss is non-increasing on this suite.
  for (std::size_t e = 1; e < result.epoch_mean_loss.size(); ++e) {
    EXPECT_LE(result.epoch_mean_loss[e], result.epoch_mean_loss[e - 1] + 1e-12);
  }
}

TEST(PairsFile, SaveLoadRoundTrip) {
  testsupport::TempDir dir("pairs");
  PreferencePair p = pair_for("q9", 2, 5);
  p.chosen_text = "chosen text";
  p.rejected_text = "rejected text";
  const auto path = dir.file("pairs.jsonl");
  save_pairs({p}, path);
  const auto loaded = load_pairs(path);
  ASSERT_EQ(loaded.size(), 1u);
  EXPECT_EQ(loaded[0].query_id, "q9");
  EXPECT_EQ(loaded[0].chosen_index, 2);
  EXPECT_EQ(loaded[0].rejected_text, "rejected text");
}

TEST(ExportPairs, WritesPromptChosenRejected) {
  testsupport::TempDir dir("export");
  PreferencePair p = pair_for("q1", 0, 1);
  p.chosen_text = "good passage";
  p.rejected_text = "bad passage";
  const auto path = dir.file("export.jsonl");
  export_pairs({p}, {{"q1", "why winter flu"}}, expandr::expansion::default_q2d_template(),
               path);
  std::ifstream in(path);
  std::string line;
  ASSERT_TRUE(std::getline(in, line));
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.size(), 3u);
  EXPECT_EQ(j.at("prompt").get<std::string>(),
            expandr::expansion::render_prompt(expandr::expansion::default_q2d_template(),
                                              "why winter flu"));
  EXPECT_EQ(j.at("chosen").get<std::string>(), "good passage");
  EXPECT_EQ(j.at("rejected").get<std::string>(), "bad passage");
  ASSERT_FALSE(std::getline(in, line));
}

TEST(ExportPairs, EmptyListWritesEmptyFile) {
  testsupport::TempDir dir("export");
  const auto path = dir.file("export.jsonl");
  export_pairs({}, {}, expandr::expansion::default_q2d_template(), path);
  EXPECT_TRUE(expandr::digest::read_file_bytes(path).empty());
}

TEST(Policy, SaveLoadRoundTrip) {
  testsupport::TempDir dir("policy");
  ToyPolicy policy;
  auto entry = make_policy_entry({"a", "b"});
  entry.logits = {0.5, -0.5};
  policy.by_query.emplace("q1", entry);
  const auto path = dir.file("policy.json");
  save_policy(policy, path);
  const auto loaded = load_policy(path);
  ASSERT_EQ(loaded.by_query.size(), 1u);
  EXPECT_EQ(loaded.by_query.at("q1").logits, entry.logits);
  EXPECT_EQ(loaded.by_query.at("q1").ref_logits, entry.ref_logits);
  EXPECT_EQ(loaded.by_query.at("q1").texts, entry.texts);
}
