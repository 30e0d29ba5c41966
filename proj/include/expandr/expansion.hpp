#pragma once

// Expansion generation: prompt templates, generation cleanup, candidate
// sampling over a temperature grid, the trainable per-query categorical
// policy, and the low-similarity query filter. Text generators are
// pluggable; the offline template generator bridges query vocabulary to
// document vocabulary without any network.

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "expandr/corpus.hpp"
#include "expandr/numerics.hpp"
#include "json.hpp"

namespace expandr::expansion {

using numerics::Rng;
using numerics::Vec;

enum class PromptKind { kQ2d, kQ2a };

/// q2d templates carry one `{}` placeholder (the query); q2a templates carry
/// two (query, related document).
struct PromptTemplate {
  PromptKind kind = PromptKind::kQ2d;
  std::string text;
};

inline PromptTemplate default_q2d_template() {
  return {PromptKind::kQ2d,
          "Please write a passage to answer the question:\n"
          "Question: {}\n"
          "Passage:"};
}

inline PromptTemplate default_q2a_template() {
  return {PromptKind::kQ2a,
          "You are given a query and a related document. Based on the query, "
          "generate a direct and relevant answer using the information in the "
          "document. If the query is a statement, expand on it. If it is a "
          "question, provide a direct answer. Avoid any extra description or "
          "irrelevant content.\n"
          "Query: {}\n"
          "Related Document: {}\n"
          "Answer:"};
}

inline std::size_t count_placeholders(const std::string& text) {
  std::size_t n = 0;
  for (std::size_t pos = text.find("{}"); pos != std::string::npos;
       pos = text.find("{}", pos + 2)) {
    ++n;
  }
  return n;
}

/// Placeholder substitution in order; arity must match the template kind.
inline std::string render_prompt(const PromptTemplate& tmpl, const std::string& query,
                                 const std::optional<std::string>& doc = std::nullopt) {
  const std::size_t want = tmpl.kind == PromptKind::kQ2d ? 1 : 2;
  if (count_placeholders(tmpl.text) != want) {
    throw std::invalid_argument("render_prompt: template must have " +
                                std::to_string(want) + " placeholder(s)");
  }
  if (tmpl.kind == PromptKind::kQ2d && doc.has_value()) {
    throw std::invalid_argument("render_prompt: q2d template takes no document");
  }
  if (tmpl.kind == PromptKind::kQ2a && !doc.has_value()) {
    throw std::invalid_argument("render_prompt: q2a template requires a document");
  }
  std::string out = tmpl.text;
  std::size_t pos = out.find("{}");
  out.replace(pos, 2, query);
  if (tmpl.kind == PromptKind::kQ2a) {
    pos = out.find("{}", pos + query.size());
    out.replace(pos, 2, *doc);
  }
  return out;
}

inline const std::vector<std::string>& default_boilerplate_prefixes() {
  static const std::vector<std::string> kPrefixes = {
      "Here is a passage to answer the question:",
      "This is the answer to the query:",
  };
  return kPrefixes;
}

namespace detail {

inline bool iequals_prefix(const std::string& text, const std::string& prefix) {
  if (text.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(text[i])) !=
        std::tolower(static_cast<unsigned char>(prefix[i]))) {
      return false;
    }
  }
  return true;
}

}  // namespace detail

/// Strip one leading boilerplate prefix (case-insensitive) and trim. An
/// empty result signals an empty generation; callers drop the candidate.
inline std::string clean_generation(
    const std::string& text,
    const std::vector<std::string>& prefixes = default_boilerplate_prefixes()) {
  std::string out = corpus::trim(text);
  for (const auto& prefix : prefixes) {
    if (detail::iequals_prefix(out, prefix)) {
      out = corpus::trim(out.substr(prefix.size()));
      break;
    }
  }
  return out;
}

struct ExpansionCandidate {
  std::string text;
  double temperature = 1.0;
  int sample_index = 0;
  std::string source;  // template | toy_policy | external
};

struct GenRequest {
  std::string prompt;
  std::string query_text;
  double temperature = 1.0;
  int sample_index = 0;
};

class Generator {
 public:
  virtual ~Generator() = default;

  /// Raw expansion text for a q2d-style request (cleanup is the caller's).
  virtual std::string generate(const GenRequest& request) = 0;

  /// Answer text given the query and its gold document. The default path
  /// renders the q2a prompt and generates from it.
  virtual std::string answer(const std::string& query_text, const std::string& doc_text,
                             const PromptTemplate& q2a_template) {
    GenRequest request;
    request.prompt = render_prompt(q2a_template, query_text, doc_text);
    request.query_text = query_text;
    return generate(request);
  }

  virtual std::string source_name() const = 0;
};

struct TemplateGeneratorConfig {
  int top_m = 8;
  bool vary_with_temperature = false;
};

/// Offline stand-in generator. It lexically matches the query against the
/// reference corpus (title + text tokens) and emits the query text followed
/// by the matched document's top-m TF tokens, which bridges disjoint
/// query/document vocabularies. With vary_with_temperature set, m scales
/// with the sampling temperature so a temperature grid yields distinct
/// candidates; otherwise output depends on the query alone.
class TemplateGenerator : public Generator {
 public:
  using Config = TemplateGeneratorConfig;

  explicit TemplateGenerator(const std::vector<corpus::Document>& docs,
                             Config config = Config())
      : config_(config) {
    doc_tokens_.reserve(docs.size());
    for (const auto& d : docs) {
      auto toks = corpus::raw_tokens(d.title);
      auto body = corpus::raw_tokens(d.text);
      toks.insert(toks.end(), body.begin(), body.end());
      doc_tokens_.push_back(std::move(toks));
    }
  }

  std::string generate(const GenRequest& request) override {
    const int match = best_match(request.query_text);
    if (match < 0) return request.query_text;
    const int m = effective_m(request.temperature);
    return expand_from_tokens(request.query_text, doc_tokens_[match], m);
  }

  std::string answer(const std::string& query_text, const std::string& doc_text,
                     const PromptTemplate&) override {
    return expand_from_tokens(query_text, corpus::raw_tokens(doc_text), config_.top_m);
  }

  std::string source_name() const override { return "template"; }

  /// Query text + the doc's top-m tokens by TF (ties by first occurrence).
  static std::string expand_from_tokens(const std::string& query_text,
                                        const std::vector<std::string>& doc_tokens,
                                        int top_m) {
    struct TokenStat {
      std::string token;
      int freq = 0;
      std::size_t first_pos = 0;
    };
    std::unordered_map<std::string, std::size_t> where;
    std::vector<TokenStat> stats;
    for (std::size_t i = 0; i < doc_tokens.size(); ++i) {
      auto it = where.find(doc_tokens[i]);
      if (it == where.end()) {
        where.emplace(doc_tokens[i], stats.size());
        stats.push_back({doc_tokens[i], 1, i});
      } else {
        ++stats[it->second].freq;
      }
    }
    std::sort(stats.begin(), stats.end(), [](const TokenStat& a, const TokenStat& b) {
      if (a.freq != b.freq) return a.freq > b.freq;
      return a.first_pos < b.first_pos;
    });
    std::string out = query_text;
    const std::size_t take = std::min<std::size_t>(std::max(top_m, 0), stats.size());
    for (std::size_t i = 0; i < take; ++i) {
      out += ' ';
      out += stats[i].token;
    }
    return out;
  }

 private:
  int effective_m(double temperature) const {
    if (!config_.vary_with_temperature) return config_.top_m;
    const int m = static_cast<int>(std::lround(config_.top_m * temperature));
    return std::max(1, m);
  }

  /// Highest distinct-token overlap wins; ties go to the earliest document.
  int best_match(const std::string& query_text) const {
    const auto q = corpus::raw_tokens(query_text);
    const std::set<std::string> query_set(q.begin(), q.end());
    int best = -1;
    std::size_t best_overlap = 0;
    for (std::size_t i = 0; i < doc_tokens_.size(); ++i) {
      std::set<std::string> seen;
      std::size_t overlap = 0;
      for (const auto& tok : doc_tokens_[i]) {
        if (query_set.count(tok) != 0 && seen.insert(tok).second) ++overlap;
      }
      if (overlap > best_overlap) {
        best_overlap = overlap;
        best = static_cast<int>(i);
      }
    }
    return best;
  }

  Config config_;
  std::vector<std::vector<std::string>> doc_tokens_;
};

/// |temps| x samples_per_temp generations, cleaned, deduplicated by exact
/// text (first occurrence wins), ordered by (temperature position, sample
/// index). Generator failures surface with the query id attached.
inline std::vector<ExpansionCandidate> sample_candidates(
    Generator& generator, const std::string& query_id, const std::string& query_text,
    const PromptTemplate& q2d_template, const std::vector<double>& temps,
    int samples_per_temp, Rng& rng) {
  if (temps.empty()) throw std::invalid_argument("sample_candidates: empty temperature grid");
  for (double t : temps) {
    if (!(t > 0.0)) throw std::invalid_argument("sample_candidates: temperatures must be > 0");
  }
  if (samples_per_temp < 1) {
    throw std::invalid_argument("sample_candidates: samples_per_temp must be >= 1");
  }
  const std::string prompt = render_prompt(q2d_template, query_text);
  (void)rng;  // current generators draw no randomness; kept for API stability
  std::vector<ExpansionCandidate> out;
  std::set<std::string> seen;
  for (double temp : temps) {
    for (int s = 0; s < samples_per_temp; ++s) {
      GenRequest request{prompt, query_text, temp, s};
      std::string text;
      try {
        text = generator.generate(request);
      } catch (const std::exception& e) {
        throw std::runtime_error("generation failed for query '" + query_id +
                                 "': " + e.what());
      }
      text = clean_generation(text);
      if (text.empty()) continue;
      if (!seen.insert(text).second) continue;
      out.push_back({text, temp, s, generator.source_name()});
    }
  }
  return out;
}

/// Per-query categorical policy over that query's candidate texts, plus a
/// frozen reference copy. This is the DPO training target at desk scale.
struct PolicyEntry {
  std::vector<std::string> texts;
  Vec logits;
  Vec ref_logits;  // frozen at init

  std::size_t k() const { return logits.size(); }
};

struct ToyPolicy {
  std::map<std::string, PolicyEntry> by_query;

  const PolicyEntry* entry(const std::string& query_id) const {
    auto it = by_query.find(query_id);
    return it == by_query.end() ? nullptr : &it->second;
  }
};

inline PolicyEntry make_policy_entry(std::vector<std::string> texts) {
  PolicyEntry entry;
  entry.logits.assign(texts.size(), 0.0);
  entry.ref_logits = entry.logits;
  entry.texts = std::move(texts);
  return entry;
}

/// log-softmax of the selected logit vector at candidate_index.
inline double toy_policy_logprob(const PolicyEntry& entry, std::size_t candidate_index,
                                 bool use_reference) {
  const Vec& logits = use_reference ? entry.ref_logits : entry.logits;
  if (candidate_index >= logits.size()) {
    throw std::out_of_range("toy_policy_logprob: candidate index " +
                            std::to_string(candidate_index) + " out of range for K=" +
                            std::to_string(logits.size()));
  }
  return numerics::log_softmax(logits)[candidate_index];
}

/// A query is retained iff the best cosine between its vector and any of its
/// candidate vectors reaches the threshold. Monotone in the threshold.
inline std::set<std::string> filter_queries(
    const std::map<std::string, std::vector<Vec>>& candidate_vecs,
    const std::map<std::string, Vec>& query_vecs, double threshold) {
  if (threshold < -1.0 || threshold > 1.0) {
    throw std::invalid_argument("filter_queries: threshold must lie in [-1, 1]");
  }
  std::set<std::string> retained;
  for (const auto& [qid, cands] : candidate_vecs) {
    auto qit = query_vecs.find(qid);
    if (qit == query_vecs.end()) continue;
    double best = -2.0;
    for (const auto& cv : cands) {
      best = std::max(best, numerics::cosine(qit->second, cv));
    }
    if (best >= threshold) retained.insert(qid);
  }
  return retained;
}

// expansions.jsonl rows: {"query_id": ..., "candidates": [{"text", "temperature",
// "sample_index", "source"}, ...]}

struct QueryExpansions {
  std::string query_id;
  std::vector<ExpansionCandidate> candidates;
};

inline void save_expansions(const std::vector<QueryExpansions>& rows,
                            const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write expansions file: " + path);
  for (const auto& row : rows) {
    nlohmann::json j;
    j["query_id"] = row.query_id;
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : row.candidates) {
      cands.push_back({{"text", c.text},
                       {"temperature", c.temperature},
                       {"sample_index", c.sample_index},
                       {"source", c.source}});
    }
    j["candidates"] = std::move(cands);
    out << j.dump() << '\n';
  }
}

inline std::vector<QueryExpansions> load_expansions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open expansions file: " + path);
  std::vector<QueryExpansions> rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed expansions row");
    }
    QueryExpansions row;
    row.query_id = j.at("query_id").get<std::string>();
    for (const auto& c : j.at("candidates")) {
      ExpansionCandidate cand;
      cand.text = c.at("text").get<std::string>();
      cand.temperature = c.at("temperature").get<double>();
      cand.sample_index = c.at("sample_index").get<int>();
      cand.source = c.at("source").get<std::string>();
      row.candidates.push_back(std::move(cand));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace expandr::expansion
