#pragma once

// Data model and ingestion for queries, documents, relevance judgments, and
// the whitespace-free deterministic vocabulary. File formats follow the BEIR
// dump conventions (JSONL corpus/queries, TSV qrels) so real dumps load
// unchanged at small scale.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "expandr/digest.hpp"
#include "json.hpp"

namespace expandr::corpus {

struct Document {
  std::string id;
  std::string title;  // may be empty
  std::string text;   // non-empty after trim
};

struct Query {
  std::string id;
  std::string text;
};

/// Graded relevance judgments. Later duplicates overwrite earlier ones and
/// bump `duplicate_overwrites`.
struct Qrels {
  // query_id -> (doc_id -> grade)
  std::map<std::string, std::map<std::string, int>> entries;
  int duplicate_overwrites = 0;

  const std::map<std::string, int>* for_query(const std::string& query_id) const {
    auto it = entries.find(query_id);
    return it == entries.end() ? nullptr : &it->second;
  }
};

inline std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

/// Lowercase ASCII alphanumeric runs; everything else separates tokens.
inline std::vector<std::string> raw_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Token -> id map. Id 0 is reserved for UNK; real tokens take 1..V-1.
struct Vocabulary {
  std::unordered_map<std::string, int> token_to_id;
  std::vector<std::string> id_to_token;  // index 0 is the UNK sentinel

  std::size_t size() const { return id_to_token.size(); }

  int id_of(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? 0 : it->second;
  }

  /// Serialization used both for vocab.tsv and the checkpoint hash.
  std::string to_tsv() const {
    std::string out;
    for (std::size_t i = 1; i < id_to_token.size(); ++i) {
      out += id_to_token[i];
      out += '\t';
      out += std::to_string(i);
      out += '\n';
    }
    return out;
  }

  std::uint64_t hash() const { return digest::fnv1a64(to_tsv()); }
};

namespace detail {

inline nlohmann::json parse_jsonl_line(const std::string& line, int line_no,
                                       const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) +
                             ": malformed JSON line");
  }
  return j;
}

inline std::string require_string(const nlohmann::json& j, const char* key,
                                  int line_no, const std::string& path) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) +
                             ": missing string key '" + key + "'");
  }
  return j.at(key).get<std::string>();
}

}  // namespace detail

inline std::vector<Document> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus file: " + path);
  std::vector<Document> docs;
  std::unordered_map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed JSON line");
    }
    const auto j = detail::parse_jsonl_line(line, line_no, path);
    Document d;
    d.id = detail::require_string(j, "_id", line_no, path);
    d.title = j.contains("title") ? detail::require_string(j, "title", line_no, path)
                                  : std::string();
    d.text = detail::require_string(j, "text", line_no, path);
    if (trim(d.text).empty()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": document text empty after trim");
    }
    if (!seen.emplace(d.id, line_no).second) {
      throw std::runtime_error(path + ": duplicate document id '" + d.id + "'");
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

inline std::vector<Query> load_queries(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open queries file: " + path);
  std::vector<Query> queries;
  std::unordered_map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": malformed JSON line");
    }
    const auto j = detail::parse_jsonl_line(line, line_no, path);
    Query q;
    q.id = detail::require_string(j, "_id", line_no, path);
    q.text = detail::require_string(j, "text", line_no, path);
    if (trim(q.text).empty()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": query text empty after trim");
    }
    if (!seen.emplace(q.id, line_no).second) {
      throw std::runtime_error(path + ": duplicate query id '" + q.id + "'");
    }
    queries.push_back(std::move(q));
  }
  return queries;
}

inline const std::string kQrelsHeader = "query-id\tcorpus-id\tscore";

inline Qrels load_qrels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open qrels file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kQrelsHeader) {
    throw std::runtime_error(path + ":1: expected qrels header '" + kQrelsHeader + "'");
  }
  Qrels qrels;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string qid, did, score_str;
    if (!std::getline(ss, qid, '\t') || !std::getline(ss, did, '\t') ||
        !std::getline(ss, score_str, '\t')) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 3 tab-separated fields");
    }
    int grade = 0;
    try {
      std::size_t pos = 0;
      grade = std::stoi(score_str, &pos);
      if (pos != score_str.size()) throw std::invalid_argument("trailing chars");
    } catch (const std::exception&) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": non-integer score '" + score_str + "'");
    }
    if (grade < 0) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": negative relevance grade");
    }
    auto& per_query = qrels.entries[qid];
    auto it = per_query.find(did);
    if (it != per_query.end()) {
      ++qrels.duplicate_overwrites;
      it->second = grade;
    } else {
      per_query.emplace(did, grade);
    }
  }
  return qrels;
}

inline void save_corpus(const std::vector<Document>& docs, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  for (const auto& d : docs) {
    nlohmann::json j;
    j["_id"] = d.id;
    j["title"] = d.title;
    j["text"] = d.text;
    out << j.dump() << '\n';
  }
}

inline void save_queries(const std::vector<Query>& queries, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write queries file: " + path);
  for (const auto& q : queries) {
    nlohmann::json j;
    j["_id"] = q.id;
    j["text"] = q.text;
    out << j.dump() << '\n';
  }
}

inline void save_qrels(const Qrels& qrels, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write qrels file: " + path);
  out << kQrelsHeader << '\n';
  for (const auto& [qid, per_query] : qrels.entries) {
    for (const auto& [did, grade] : per_query) {
      out << qid << '\t' << did << '\t' << grade << '\n';
    }
  }
}

/// Ids are assigned in descending frequency, ties broken lexicographically.
/// Tokens below min_freq are dropped (they map to UNK at tokenize time).
inline Vocabulary build_vocabulary(const std::vector<Document>& docs,
                                   const std::vector<Query>& queries,
                                   int min_freq = 1) {
  if (min_freq < 1) throw std::invalid_argument("build_vocabulary: min_freq must be >= 1");
  std::map<std::string, std::int64_t> freq;
  auto count = [&freq](const std::string& text) {
    for (auto& tok : raw_tokens(text)) ++freq[tok];
  };
  for (const auto& d : docs) {
    count(d.title);
    count(d.text);
  }
  for (const auto& q : queries) count(q.text);

  std::vector<std::pair<std::string, std::int64_t>> kept;
  kept.reserve(freq.size());
  for (auto& [tok, f] : freq) {
    if (f >= min_freq) kept.emplace_back(tok, f);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  vocab.id_to_token.push_back("<unk>");
  for (auto& [tok, f] : kept) {
    vocab.token_to_id.emplace(tok, static_cast<int>(vocab.id_to_token.size()));
    vocab.id_to_token.push_back(tok);
  }
  return vocab;
}

inline std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab) {
  std::vector<int> ids;
  for (auto& tok : raw_tokens(text)) ids.push_back(vocab.id_of(tok));
  return ids;
}

inline void save_vocabulary(const Vocabulary& vocab, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
  out << vocab.to_tsv();
}

inline Vocabulary load_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary file: " + path);
  Vocabulary vocab;
  vocab.id_to_token.push_back("<unk>");
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected 'token\\tid'");
    }
    const std::string tok = line.substr(0, tab);
    const int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(vocab.id_to_token.size())) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": ids must be dense and sorted");
    }
    vocab.token_to_id.emplace(tok, id);
    vocab.id_to_token.push_back(tok);
  }
  return vocab;
}

}  // namespace expandr::corpus
