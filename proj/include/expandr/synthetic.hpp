#pragma once

// Generator for the vocabulary-gap benchmark instance: query tokens and
// document-body tokens come from disjoint vocabularies, gold documents carry
// their query's text as a title, and document bodies are built from a shared
// token pool. Raw lexical retrieval sees nothing; the template generator can
// bridge the gap through title matching.

#include <string>
#include <vector>

#include "expandr/corpus.hpp"
#include "expandr/numerics.hpp"

namespace expandr::synthetic {

struct SyntheticSpec {
  int n_topics = 100;        // one query + one gold document each
  int n_distractors = 100;   // untitled pool-token documents
  int n_train = 70;          // leading topics; the rest are held out for eval
  int doc_pool = 36;         // shared document-vocabulary size
  int core_tokens = 5;       // repeated tokens that define a gold document
  int extra_tokens = 7;      // once-only tokens appended after the cores
  std::uint64_t seed = 7;
};

struct SyntheticInstance {
  std::vector<corpus::Document> docs;
  std::vector<corpus::Query> train_queries;
  std::vector<corpus::Query> eval_queries;
  corpus::Qrels train_qrels;
  corpus::Qrels eval_qrels;
};

namespace detail {

inline std::string pool_token(int i) { return "dp" + std::to_string(i); }

inline std::vector<int> sample_distinct(numerics::Rng& rng, int pool, int count) {
  std::vector<int> all(pool);
  for (int i = 0; i < pool; ++i) all[i] = i;
  rng.shuffle(all);
  all.resize(count);
  return all;
}

}  // namespace detail

inline SyntheticInstance make_instance(const SyntheticSpec& spec = {}) {
  if (spec.n_train < 0 || spec.n_train > spec.n_topics) {
    throw std::invalid_argument("make_instance: n_train out of range");
  }
  if (spec.core_tokens + spec.extra_tokens > spec.doc_pool) {
    throw std::invalid_argument("make_instance: doc pool too small");
  }
  SyntheticInstance inst;
  numerics::Rng rng(spec.seed);

  for (int t = 0; t < spec.n_topics; ++t) {
    const std::string ts = std::to_string(t);
    const std::string query_text = "qa" + ts + " qb" + ts + " qc" + ts;
    const std::string qid = "q" + ts;
    const std::string did = "gold" + ts;

    numerics::Rng topic_rng = rng.split(static_cast<std::uint64_t>(t) + 100);
    const auto picks = detail::sample_distinct(topic_rng, spec.doc_pool,
                                               spec.core_tokens + spec.extra_tokens);
    std::string text;
    for (int rep = 0; rep < 3; ++rep) {
      for (int i = 0; i < spec.core_tokens; ++i) {
        if (!text.empty()) text += ' ';
        text += detail::pool_token(picks[i]);
      }
    }
    for (int i = spec.core_tokens; i < spec.core_tokens + spec.extra_tokens; ++i) {
      text += ' ';
      text += detail::pool_token(picks[i]);
    }
    inst.docs.push_back({did, query_text, text});

    corpus::Query q{qid, query_text};
    if (t < spec.n_train) {
      inst.train_queries.push_back(q);
      inst.train_qrels.entries[qid][did] = 1;
    } else {
      inst.eval_queries.push_back(q);
      inst.eval_qrels.entries[qid][did] = 1;
    }
  }

  numerics::Rng noise_rng = rng.split(999);
  for (int i = 0; i < spec.n_distractors; ++i) {
    const auto picks = detail::sample_distinct(noise_rng, spec.doc_pool,
                                               spec.core_tokens + spec.extra_tokens);
    std::string text;
    for (std::size_t j = 0; j < picks.size(); ++j) {
      if (j != 0) text += ' ';
      text += detail::pool_token(picks[j]);
    }
    inst.docs.push_back({"noise" + std::to_string(i), "", text});
  }
  return inst;
}

struct SyntheticPaths {
  std::string corpus;
  std::string train_queries;
  std::string eval_queries;
  std::string train_qrels;
  std::string eval_qrels;
};

inline SyntheticPaths write_instance(const SyntheticInstance& inst, const std::string& dir) {
  SyntheticPaths paths;
  paths.corpus = dir + "/corpus.jsonl";
  paths.train_queries = dir + "/queries_train.jsonl";
  paths.eval_queries = dir + "/queries_eval.jsonl";
  paths.train_qrels = dir + "/qrels_train.tsv";
  paths.eval_qrels = dir + "/qrels_eval.tsv";
  corpus::save_corpus(inst.docs, paths.corpus);
  corpus::save_queries(inst.train_queries, paths.train_queries);
  corpus::save_queries(inst.eval_queries, paths.eval_queries);
  corpus::save_qrels(inst.train_qrels, paths.train_qrels);
  corpus::save_qrels(inst.eval_qrels, paths.eval_qrels);
  return paths;
}

}  // namespace expandr::synthetic
