#pragma once

// Preference-pair construction from reward records, the DPO loss over the
// per-query categorical policy with its analytic gradient, the training
// loop, and the export format consumed by external full-scale trainers.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "expandr/expansion.hpp"
#include "expandr/numerics.hpp"
#include "expandr/reward.hpp"
#include "json.hpp"

namespace expandr::dpo {

using expansion::PolicyEntry;
using expansion::ToyPolicy;
using numerics::Rng;
using numerics::Vec;

struct PreferencePair {
  std::string query_id;
  int chosen_index = 0;
  int rejected_index = 0;
  std::string chosen_text;
  std::string rejected_text;
  double reward_chosen = 0.0;
  double reward_rejected = 0.0;
};

enum class PairStrategy { kMaxMin, kAllAboveMargin };

inline PairStrategy parse_pair_strategy(const std::string& name) {
  if (name == "max_min") return PairStrategy::kMaxMin;
  if (name == "all_above_margin") return PairStrategy::kAllAboveMargin;
  throw std::invalid_argument("unknown pair strategy '" + name + "'");
}

struct DpoConfig {
  double beta = 0.1;
  double margin = 0.0;
  PairStrategy strategy = PairStrategy::kMaxMin;
  double learning_rate = 0.5;
  int epochs = 200;
};

struct BuildPairsResult {
  std::vector<PreferencePair> pairs;
  int skipped_queries = 0;  // fewer than 2 candidates
};

/// max_min picks the highest-total candidate as chosen and the lowest as
/// rejected (ties by ascending index); all_above_margin emits every ordered
/// pair. Either way the reward gap must be strictly positive and at least
/// the margin. Queries arrive as (query_id -> records ordered by candidate
/// index, texts aligned with candidate indices).
inline BuildPairsResult build_pairs(
    const std::map<std::string, std::vector<reward::RewardRecord>>& rewards_by_query,
    const std::map<std::string, std::vector<std::string>>& texts_by_query,
    const DpoConfig& config) {
  if (config.beta <= 0.0) throw std::invalid_argument("build_pairs: beta must be > 0");
  if (config.margin < 0.0) throw std::invalid_argument("build_pairs: margin must be >= 0");
  BuildPairsResult result;
  for (const auto& [qid, records] : rewards_by_query) {
    if (records.size() < 2) {
      ++result.skipped_queries;
      continue;
    }
    auto texts_it = texts_by_query.find(qid);
    if (texts_it == texts_by_query.end() || texts_it->second.size() < records.size()) {
      throw std::invalid_argument("build_pairs: missing candidate texts for query '" +
                                  qid + "'");
    }
    const auto& texts = texts_it->second;
    auto emit = [&](std::size_t chosen, std::size_t rejected) {
      const double gap = records[chosen].r_total - records[rejected].r_total;
      if (!(records[chosen].r_total > records[rejected].r_total)) return;
      if (gap < config.margin) return;
      PreferencePair pair;
      pair.query_id = qid;
      pair.chosen_index = records[chosen].candidate_index;
      pair.rejected_index = records[rejected].candidate_index;
      pair.chosen_text = texts[pair.chosen_index];
      pair.rejected_text = texts[pair.rejected_index];
      pair.reward_chosen = records[chosen].r_total;
      pair.reward_rejected = records[rejected].r_total;
      result.pairs.push_back(std::move(pair));
    };
    if (config.strategy == PairStrategy::kMaxMin) {
      std::size_t best = 0;
      std::size_t worst = 0;
      for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].r_total > records[best].r_total) best = i;
        if (records[i].r_total < records[worst].r_total) worst = i;
      }
      emit(best, worst);
    } else {
      for (std::size_t i = 0; i < records.size(); ++i) {
        for (std::size_t j = 0; j < records.size(); ++j) {
          if (i != j) emit(i, j);
        }
      }
    }
  }
  return result;
}

/// -log sigma( beta * [(log pi(d+) - log pi_ref(d+)) - (log pi(d-) - log pi_ref(d-))] )
inline double dpo_loss(const PolicyEntry& entry, const PreferencePair& pair, double beta) {
  const auto c = static_cast<std::size_t>(pair.chosen_index);
  const auto r = static_cast<std::size_t>(pair.rejected_index);
  const double chosen_ratio = expansion::toy_policy_logprob(entry, c, false) -
                              expansion::toy_policy_logprob(entry, c, true);
  const double rejected_ratio = expansion::toy_policy_logprob(entry, r, false) -
                                expansion::toy_policy_logprob(entry, r, true);
  return -numerics::log_sigmoid(beta * (chosen_ratio - rejected_ratio));
}

/// Exact gradient of dpo_loss with respect to the current logits. The
/// softmax terms of the two log-probabilities cancel, leaving mass only on
/// the chosen and rejected coordinates:
///   d/dz_k = beta * (sigma(u) - 1) * (delta_chosen - delta_rejected).
inline Vec dpo_grad(const PolicyEntry& entry, const PreferencePair& pair, double beta) {
  const auto c = static_cast<std::size_t>(pair.chosen_index);
  const auto r = static_cast<std::size_t>(pair.rejected_index);
  const double chosen_ratio = expansion::toy_policy_logprob(entry, c, false) -
                              expansion::toy_policy_logprob(entry, c, true);
  const double rejected_ratio = expansion::toy_policy_logprob(entry, r, false) -
                                expansion::toy_policy_logprob(entry, r, true);
  const double u = beta * (chosen_ratio - rejected_ratio);
  const double scale = beta * (-1.0 / (1.0 + std::exp(u)));  // beta * (sigma(u) - 1)
  Vec grad(entry.k(), 0.0);
  grad[c] += scale;
  grad[r] -= scale;
  return grad;
}

struct TrainDpoResult {
  std::vector<double> epoch_mean_loss;
};

/// Plain gradient descent over a seeded shuffle of the pairs. Reference
/// logits are never touched.
inline TrainDpoResult train_dpo(ToyPolicy& policy, const std::vector<PreferencePair>& pairs,
                                const DpoConfig& config, Rng rng) {
  if (pairs.empty()) throw std::invalid_argument("train_dpo: no preference pairs");
  if (config.epochs < 0) throw std::invalid_argument("train_dpo: negative epoch count");
  TrainDpoResult result;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const auto& pair = pairs[idx];
      auto it = policy.by_query.find(pair.query_id);
      if (it == policy.by_query.end()) {
        throw std::invalid_argument("train_dpo: policy has no entry for query '" +
                                    pair.query_id + "'");
      }
      PolicyEntry& entry = it->second;
      const double loss = dpo_loss(entry, pair, config.beta);
      if (!std::isfinite(loss)) {
        throw numerics::NumericalError("train_dpo: non-finite loss on pair for query '" +
                                       pair.query_id + "'");
      }
      loss_sum += loss;
      const Vec grad = dpo_grad(entry, pair, config.beta);
      for (std::size_t k = 0; k < grad.size(); ++k) {
        entry.logits[k] -= config.learning_rate * grad[k];
      }
    }
    result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(pairs.size()));
  }
  return result;
}

/// Fraction of pairs whose chosen candidate out-scores its rejected one
/// under the current policy.
inline double pair_accuracy(const ToyPolicy& policy,
                            const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& pair : pairs) {
    const auto* entry = policy.entry(pair.query_id);
    if (entry == nullptr) continue;
    const double lp_chosen = expansion::toy_policy_logprob(
        *entry, static_cast<std::size_t>(pair.chosen_index), false);
    const double lp_rejected = expansion::toy_policy_logprob(
        *entry, static_cast<std::size_t>(pair.rejected_index), false);
    if (lp_chosen > lp_rejected) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

// Internal pair file keeps ids, indices, and rewards alongside the texts so
// pipelines can rebuild policies; the export format below is the trimmed
// {prompt, chosen, rejected} JSONL used by external trainers.

inline void save_pairs(const std::vector<PreferencePair>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write pairs file: " + path);
  for (const auto& p : pairs) {
    nlohmann::json j;
    j["query_id"] = p.query_id;
    j["chosen_index"] = p.chosen_index;
    j["rejected_index"] = p.rejected_index;
    j["chosen_text"] = p.chosen_text;
    j["rejected_text"] = p.rejected_text;
    j["reward_chosen"] = p.reward_chosen;
    j["reward_rejected"] = p.reward_rejected;
    out << j.dump() << '\n';
  }
}

inline std::vector<PreferencePair> load_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open pairs file: " + path);
  std::vector<PreferencePair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    PreferencePair p;
    p.query_id = j.at("query_id").get<std::string>();
    p.chosen_index = j.at("chosen_index").get<int>();
    p.rejected_index = j.at("rejected_index").get<int>();
    p.chosen_text = j.at("chosen_text").get<std::string>();
    p.rejected_text = j.at("rejected_text").get<std::string>();
    p.reward_chosen = j.at("reward_chosen").get<double>();
    p.reward_rejected = j.at("reward_rejected").get<double>();
    pairs.push_back(std::move(p));
  }
  return pairs;
}

/// JSONL rows {"prompt": rendered q2d prompt, "chosen": ..., "rejected": ...}.
inline void export_pairs(const std::vector<PreferencePair>& pairs,
                         const std::map<std::string, std::string>& query_texts,
                         const expansion::PromptTemplate& q2d_template,
                         const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write export file: " + path);
  for (const auto& p : pairs) {
    auto it = query_texts.find(p.query_id);
    if (it == query_texts.end()) {
      throw std::invalid_argument("export_pairs: no query text for id '" + p.query_id + "'");
    }
    nlohmann::json j;
    j["prompt"] = expansion::render_prompt(q2d_template, it->second);
    j["chosen"] = p.chosen_text;
    j["rejected"] = p.rejected_text;
    out << j.dump() << '\n';
  }
}

/// Policy snapshot (current + reference logits and candidate texts) as JSON;
/// std::map keys keep the file deterministic.
inline void save_policy(const ToyPolicy& policy, const std::string& path) {
  nlohmann::json j;
  nlohmann::json queries = nlohmann::json::object();
  for (const auto& [qid, entry] : policy.by_query) {
    queries[qid] = {{"texts", entry.texts},
                    {"logits", entry.logits},
                    {"ref_logits", entry.ref_logits}};
  }
  j["queries"] = std::move(queries);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write policy file: " + path);
  out << j.dump(2) << '\n';
}

inline ToyPolicy load_policy(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open policy file: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  ToyPolicy policy;
  for (const auto& [qid, e] : j.at("queries").items()) {
    PolicyEntry entry;
    entry.texts = e.at("texts").get<std::vector<std::string>>();
    entry.logits = e.at("logits").get<Vec>();
    entry.ref_logits = e.at("ref_logits").get<Vec>();
    policy.by_query.emplace(qid, std::move(entry));
  }
  return policy;
}

}  // namespace expandr::dpo
