#pragma once

// Exact dense retrieval (dot-product scoring, stable top-k, the Rank
// function used by reward modeling) and the IR metrics nDCG@k, Recall@k,
// MRR. Ties break by ascending original index everywhere so golden tests
// stay deterministic.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "expandr/corpus.hpp"
#include "expandr/numerics.hpp"

namespace expandr::retriever {

using corpus::Qrels;
using numerics::Matrix;
using numerics::Vec;

/// Immutable after build; scoring is read-only and safe to share.
struct DenseIndex {
  std::vector<std::string> doc_ids;
  Matrix embeddings;  // N x d

  std::size_t size() const { return doc_ids.size(); }
  std::size_t dim() const { return embeddings.cols; }
};

inline DenseIndex build_index(std::vector<std::string> doc_ids, Matrix embeddings) {
  if (doc_ids.size() != embeddings.rows) {
    throw std::invalid_argument("build_index: doc id / embedding row count mismatch");
  }
  return DenseIndex{std::move(doc_ids), std::move(embeddings)};
}

struct RankedList {
  std::string query_id;
  std::vector<std::pair<std::string, double>> entries;  // descending score
};

/// Dot product against every index row, in index order.
inline Vec score(const Vec& query_vec, const DenseIndex& index) {
  if (query_vec.size() != index.dim()) {
    throw std::invalid_argument("score: query dim " + std::to_string(query_vec.size()) +
                                " does not match index dim " + std::to_string(index.dim()));
  }
  Vec out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    out[i] = numerics::dot(query_vec.data(), index.embeddings.row(i), index.dim());
  }
  return out;
}

/// Indices of the k highest scores (all if fewer), score-descending with
/// ties by ascending original index.
inline std::vector<std::pair<std::size_t, double>> top_k(const Vec& scores,
                                                         std::size_t k) {
  if (k < 1) throw std::invalid_argument("top_k: k must be >= 1");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto cmp = [&scores](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  const std::size_t take = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + take, idx.end(), cmp);
  std::vector<std::pair<std::size_t, double>> out;
  out.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.emplace_back(idx[i], scores[idx[i]]);
  return out;
}

inline RankedList search(const DenseIndex& index, const Vec& query_vec,
                         std::size_t k, const std::string& query_id) {
  RankedList run;
  run.query_id = query_id;
  for (auto& [i, s] : top_k(score(query_vec, index), k)) {
    run.entries.emplace_back(index.doc_ids[i], s);
  }
  return run;
}

/// 1-based rank of candidates[target_index] when all candidates are sorted
/// by descending dot with the pseudo-query, ties by ascending index.
inline std::size_t rank_of(const Vec& pseudo_query_vec,
                           const std::vector<Vec>& candidates,
                           std::size_t target_index) {
  if (target_index >= candidates.size()) {
    throw std::out_of_range("rank_of: target index " + std::to_string(target_index) +
                            " out of bounds for " + std::to_string(candidates.size()) +
                            " candidates");
  }
  const double target_score = numerics::dot(pseudo_query_vec, candidates[target_index]);
  std::size_t rank = 1;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (i == target_index) continue;
    const double s = numerics::dot(pseudo_query_vec, candidates[i]);
    if (s > target_score || (s == target_score && i < target_index)) ++rank;
  }
  return rank;
}

enum class DcgGain { kLinear, kExponential };

/// Per-metric bookkeeping for declared skip rules and dangling-id warnings.
struct EvalCounters {
  int ndcg_no_relevant = 0;
  int recall_no_relevant = 0;
  int dangling_qrels_docs = 0;
};

namespace detail {

inline double gain(int grade, DcgGain mode) {
  if (mode == DcgGain::kLinear) return static_cast<double>(grade);
  return std::pow(2.0, static_cast<double>(grade)) - 1.0;
}

}  // namespace detail

/// DCG@k over the run divided by the ideal DCG from qrels; 0.0 (and a skip
/// count) when the query has no relevant documents. Linear gain matches the
/// trec_eval default used by BEIR tooling.
inline double ndcg_at_k(const RankedList& run, const Qrels& qrels, std::size_t k = 10,
                        DcgGain gain_mode = DcgGain::kLinear,
                        EvalCounters* counters = nullptr) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  const auto* rels = qrels.for_query(run.query_id);
  std::vector<int> grades;
  if (rels != nullptr) {
    for (const auto& [did, grade] : *rels) {
      if (grade > 0) grades.push_back(grade);
    }
  }
  if (grades.empty()) {
    if (counters != nullptr) ++counters->ndcg_no_relevant;
    return 0.0;
  }
  std::sort(grades.begin(), grades.end(), std::greater<int>());
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, grades.size()); ++i) {
    ideal += detail::gain(grades[i], gain_mode) / std::log2(static_cast<double>(i) + 2.0);
  }
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, run.entries.size()); ++i) {
    auto it = rels->find(run.entries[i].first);
    if (it != rels->end() && it->second > 0) {
      dcg += detail::gain(it->second, gain_mode) / std::log2(static_cast<double>(i) + 2.0);
    }
  }
  return dcg / ideal;
}

/// Fraction of the query's relevant documents found in the top k. Queries
/// without relevant documents return nullopt and are excluded from
/// macro-averages.
inline std::optional<double> recall_at_k(const RankedList& run, const Qrels& qrels,
                                         std::size_t k = 100,
                                         EvalCounters* counters = nullptr) {
  if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
  const auto* rels = qrels.for_query(run.query_id);
  std::size_t relevant = 0;
  if (rels != nullptr) {
    for (const auto& [did, grade] : *rels) {
      if (grade > 0) ++relevant;
    }
  }
  if (relevant == 0) {
    if (counters != nullptr) ++counters->recall_no_relevant;
    return std::nullopt;
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < std::min(k, run.entries.size()); ++i) {
    auto it = rels->find(run.entries[i].first);
    if (it != rels->end() && it->second > 0) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(relevant);
}

/// Reciprocal rank of the first relevant document, 0 when none appears.
inline double mrr(const RankedList& run, const Qrels& qrels) {
  const auto* rels = qrels.for_query(run.query_id);
  if (rels == nullptr) return 0.0;
  for (std::size_t i = 0; i < run.entries.size(); ++i) {
    auto it = rels->find(run.entries[i].first);
    if (it != rels->end() && it->second > 0) {
      return 1.0 / static_cast<double>(i + 1);
    }
  }
  return 0.0;
}

/// Drop qrels rows whose documents are missing from the corpus, counting
/// each dropped row as a dangling-id warning.
inline Qrels prune_dangling(const Qrels& qrels,
                            const std::vector<std::string>& corpus_doc_ids,
                            EvalCounters* counters = nullptr) {
  std::unordered_map<std::string, bool> known;
  for (const auto& id : corpus_doc_ids) known.emplace(id, true);
  Qrels out;
  out.duplicate_overwrites = qrels.duplicate_overwrites;
  for (const auto& [qid, per_query] : qrels.entries) {
    for (const auto& [did, grade] : per_query) {
      if (known.count(did) != 0) {
        out.entries[qid][did] = grade;
      } else if (counters != nullptr) {
        ++counters->dangling_qrels_docs;
      }
    }
  }
  return out;
}

/// TREC run format: `query-id Q0 doc-id rank score run-tag`, rank 1-based.
inline void save_trec_run(const std::vector<RankedList>& runs, const std::string& path,
                          const std::string& run_tag) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write run file: " + path);
  char score_buf[64];
  for (const auto& run : runs) {
    for (std::size_t i = 0; i < run.entries.size(); ++i) {
      std::snprintf(score_buf, sizeof(score_buf), "%.6f", run.entries[i].second);
      out << run.query_id << " Q0 " << run.entries[i].first << ' ' << (i + 1) << ' '
          << score_buf << ' ' << run_tag << '\n';
    }
  }
}

}  // namespace expandr::retriever
