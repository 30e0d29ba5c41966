#pragma once

// Reward modeling for expansion candidates: the self-reward ranks candidates
// against a generated answer used as a query, the retriever reward ranks
// them against the ground-truth document used as a pseudo-query, and the
// total is their sum. Both components are reciprocals of 1-based ranks.

#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "expandr/expansion.hpp"
#include "expandr/numerics.hpp"
#include "expandr/retriever.hpp"
#include "json.hpp"

namespace expandr::reward {

using numerics::Vec;

struct RewardRecord {
  std::string query_id;
  int candidate_index = 0;
  double r_self = 0.0;
  double r_retriever = 0.0;
  double r_total = 0.0;
};

struct AnswerRecord {
  std::string query_id;
  std::string answer_text;
};

enum class RewardMode { kBoth, kSelfOnly, kRetrieverOnly };

inline std::string reward_mode_name(RewardMode mode) {
  switch (mode) {
    case RewardMode::kBoth: return "both";
    case RewardMode::kSelfOnly: return "self_only";
    case RewardMode::kRetrieverOnly: return "retriever_only";
  }
  throw std::logic_error("unknown reward mode");
}

inline RewardMode parse_reward_mode(const std::string& name) {
  if (name == "both") return RewardMode::kBoth;
  if (name == "self_only") return RewardMode::kSelfOnly;
  if (name == "retriever_only") return RewardMode::kRetrieverOnly;
  throw std::invalid_argument("unknown reward mode '" + name + "'");
}

/// Render the q2a prompt, generate, clean. Returns nullopt (callers count
/// and skip the query) when the generation is empty after cleanup.
inline std::optional<AnswerRecord> generate_answer(
    expansion::Generator& generator, const std::string& query_id,
    const std::string& query_text, const std::string& gold_doc_text,
    const expansion::PromptTemplate& q2a_template) {
  if (corpus::trim(gold_doc_text).empty()) {
    throw std::invalid_argument("generate_answer: gold document text is empty");
  }
  std::string text;
  try {
    text = generator.answer(query_text, gold_doc_text, q2a_template);
  } catch (const std::exception& e) {
    throw std::runtime_error("answer generation failed for query '" + query_id +
                             "': " + e.what());
  }
  text = expansion::clean_generation(text);
  if (text.empty()) return std::nullopt;
  return AnswerRecord{query_id, std::move(text)};
}

/// 1 / rank of each candidate when ranked by dot product against the
/// pseudo-query; ties break by ascending candidate index.
inline std::vector<double> reciprocal_rank_rewards(const Vec& pseudo_query_vec,
                                                   const std::vector<Vec>& candidate_vecs) {
  if (candidate_vecs.empty()) {
    throw std::invalid_argument("reciprocal_rank_rewards: empty candidate set");
  }
  std::vector<double> out(candidate_vecs.size());
  for (std::size_t i = 0; i < candidate_vecs.size(); ++i) {
    out[i] = 1.0 / static_cast<double>(
                       retriever::rank_of(pseudo_query_vec, candidate_vecs, i));
  }
  return out;
}

/// The generated answer acts as the query (Rank(y, d_exp)).
inline std::vector<double> self_reward(const Vec& answer_vec,
                                       const std::vector<Vec>& candidate_vecs) {
  return reciprocal_rank_rewards(answer_vec, candidate_vecs);
}

/// The ground-truth document acts as a pseudo-query (Rank(d_*, d_exp)).
inline std::vector<double> retriever_reward(const Vec& gold_doc_vec,
                                            const std::vector<Vec>& candidate_vecs) {
  return reciprocal_rank_rewards(gold_doc_vec, candidate_vecs);
}

inline std::vector<RewardRecord> combine(const std::string& query_id,
                                         const std::vector<double>& r_self,
                                         const std::vector<double>& r_retriever) {
  if (r_self.size() != r_retriever.size()) {
    throw std::invalid_argument("combine: reward list length mismatch (" +
                                std::to_string(r_self.size()) + " vs " +
                                std::to_string(r_retriever.size()) + ")");
  }
  std::vector<RewardRecord> out(r_self.size());
  for (std::size_t i = 0; i < r_self.size(); ++i) {
    out[i].query_id = query_id;
    out[i].candidate_index = static_cast<int>(i);
    out[i].r_self = r_self[i];
    out[i].r_retriever = r_retriever[i];
    out[i].r_total = r_self[i] + r_retriever[i];
  }
  return out;
}

/// Ablation modes zero the excluded component before combining, which is
/// exactly post-hoc zeroing of the corresponding column.
inline std::vector<RewardRecord> combine_with_mode(const std::string& query_id,
                                                   std::vector<double> r_self,
                                                   std::vector<double> r_retriever,
                                                   RewardMode mode) {
  if (mode == RewardMode::kSelfOnly) {
    std::fill(r_retriever.begin(), r_retriever.end(), 0.0);
  } else if (mode == RewardMode::kRetrieverOnly) {
    std::fill(r_self.begin(), r_self.end(), 0.0);
  }
  return combine(query_id, r_self, r_retriever);
}

inline void save_rewards(const std::vector<RewardRecord>& records,
                         const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write rewards file: " + path);
  for (const auto& r : records) {
    nlohmann::json j;
    j["query_id"] = r.query_id;
    j["candidate_index"] = r.candidate_index;
    j["r_self"] = r.r_self;
    j["r_retriever"] = r.r_retriever;
    j["r_total"] = r.r_total;
    out << j.dump() << '\n';
  }
}

inline std::vector<RewardRecord> load_rewards(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open rewards file: " + path);
  std::vector<RewardRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed reward row");
    }
    RewardRecord r;
    r.query_id = j.at("query_id").get<std::string>();
    r.candidate_index = j.at("candidate_index").get<int>();
    r.r_self = j.at("r_self").get<double>();
    r.r_retriever = j.at("r_retriever").get<double>();
    r.r_total = j.at("r_total").get<double>();
    records.push_back(std::move(r));
  }
  return records;
}

inline void save_answers(const std::vector<AnswerRecord>& answers,
                         const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write answers file: " + path);
  for (const auto& a : answers) {
    nlohmann::json j;
    j["query_id"] = a.query_id;
    j["answer_text"] = a.answer_text;
    out << j.dump() << '\n';
  }
}

inline std::vector<AnswerRecord> load_answers(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open answers file: " + path);
  std::vector<AnswerRecord> answers;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    answers.push_back({j.at("query_id").get<std::string>(),
                       j.at("answer_text").get<std::string>()});
  }
  return answers;
}

}  // namespace expandr::reward
