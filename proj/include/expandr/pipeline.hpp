#pragma once

// Pipeline orchestration: configuration, the stage graph
// ingest -> encode -> expand -> answer -> reward -> build-pairs -> train-dpo
// -> regenerate -> train-retriever -> evaluate -> report, per-stage
// manifests with input/output digests, and the three-mode evaluation
// (raw / ft / expandr).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "expandr/contrastive.hpp"
#include "expandr/corpus.hpp"
#include "expandr/digest.hpp"
#include "expandr/dpo.hpp"
#include "expandr/encoder.hpp"
#include "expandr/expansion.hpp"
#include "expandr/external_llm.hpp"
#include "expandr/fusion.hpp"
#include "expandr/report.hpp"
#include "expandr/retriever.hpp"
#include "expandr/reward.hpp"
#include "json.hpp"

namespace expandr::pipeline {

namespace fs = std::filesystem;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UpstreamError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PipelineConfig {
  // paths
  std::string corpus_path;
  std::string queries_path;
  std::string qrels_path;
  std::string workdir;
  std::string eval_queries_path;  // defaults to queries_path
  std::string eval_qrels_path;    // defaults to qrels_path

  // encoder
  int dim = 16;
  bool tied = false;
  int min_freq = 1;
  double init_scale = 0.1;
  bool include_title = false;
  int encode_threads = 1;

  // generator
  std::string generator_kind = "template";  // template | external
  expansion::TemplateGenerator::Config template_config{8, true};
  external::EndpointConfig endpoint;

  // sampling
  std::vector<double> temperatures = {0.8, 0.9, 1.0, 1.1};
  int samples_per_temp = 8;

  double filter_threshold = 0.2;
  reward::RewardMode reward_mode = reward::RewardMode::kBoth;
  dpo::DpoConfig dpo_config;
  contrastive::TrainConfig train_config;
  double policy_fraction = 0.1;
  std::string run_tag = "expandr";
  std::uint64_t seed = 42;
};

namespace detail {

template <class T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

inline std::string require_path(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) {
    throw ConfigError(std::string("config requires string paths.") + key);
  }
  return j.at(key).get<std::string>();
}

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& j) {
  PipelineConfig cfg;
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  if (!j.contains("paths") || !j.at("paths").is_object()) {
    throw ConfigError("config requires a 'paths' object");
  }
  const auto& paths = j.at("paths");
  cfg.corpus_path = detail::require_path(paths, "corpus");
  cfg.queries_path = detail::require_path(paths, "queries");
  cfg.qrels_path = detail::require_path(paths, "qrels");
  cfg.workdir = detail::require_path(paths, "workdir");
  cfg.eval_queries_path = detail::get_or<std::string>(paths, "eval_queries", cfg.queries_path);
  cfg.eval_qrels_path = detail::get_or<std::string>(paths, "eval_qrels", cfg.qrels_path);

  if (j.contains("encoder")) {
    const auto& e = j.at("encoder");
    cfg.dim = detail::get_or(e, "dim", cfg.dim);
    cfg.tied = detail::get_or(e, "tied", cfg.tied);
    cfg.min_freq = detail::get_or(e, "min_freq", cfg.min_freq);
    cfg.init_scale = detail::get_or(e, "init_scale", cfg.init_scale);
    cfg.include_title = detail::get_or(e, "include_title", cfg.include_title);
    cfg.encode_threads = detail::get_or(e, "encode_threads", cfg.encode_threads);
  }
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    cfg.generator_kind = detail::get_or<std::string>(g, "kind", cfg.generator_kind);
    if (g.contains("template")) {
      const auto& t = g.at("template");
      cfg.template_config.top_m = detail::get_or(t, "top_m", cfg.template_config.top_m);
      cfg.template_config.vary_with_temperature =
          detail::get_or(t, "vary_with_temperature", cfg.template_config.vary_with_temperature);
    }
    if (g.contains("endpoint")) {
      const auto& ep = g.at("endpoint");
      cfg.endpoint.url = detail::get_or<std::string>(ep, "url", cfg.endpoint.url);
      cfg.endpoint.model = detail::get_or<std::string>(ep, "model", cfg.endpoint.model);
      cfg.endpoint.timeout_s = detail::get_or(ep, "timeout_s", cfg.endpoint.timeout_s);
      cfg.endpoint.max_retries = detail::get_or(ep, "max_retries", cfg.endpoint.max_retries);
      cfg.endpoint.in_flight = detail::get_or(ep, "in_flight", cfg.endpoint.in_flight);
    }
  }
  if (j.contains("sampling")) {
    const auto& s = j.at("sampling");
    cfg.temperatures = detail::get_or(s, "temperatures", cfg.temperatures);
    cfg.samples_per_temp = detail::get_or(s, "samples_per_temp", cfg.samples_per_temp);
  }
  cfg.filter_threshold = detail::get_or(j, "filter_threshold", cfg.filter_threshold);
  if (j.contains("reward_mode")) {
    try {
      cfg.reward_mode = reward::parse_reward_mode(j.at("reward_mode").get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  if (j.contains("dpo")) {
    const auto& d = j.at("dpo");
    cfg.dpo_config.beta = detail::get_or(d, "beta", cfg.dpo_config.beta);
    cfg.dpo_config.margin = detail::get_or(d, "margin", cfg.dpo_config.margin);
    if (d.contains("strategy")) {
      try {
        cfg.dpo_config.strategy =
            dpo::parse_pair_strategy(d.at("strategy").get<std::string>());
      } catch (const std::exception& e) {
        throw ConfigError(e.what());
      }
    }
    cfg.dpo_config.learning_rate =
        detail::get_or(d, "learning_rate", cfg.dpo_config.learning_rate);
    cfg.dpo_config.epochs = detail::get_or(d, "epochs", cfg.dpo_config.epochs);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    cfg.train_config.batch_size = detail::get_or(t, "batch_size", cfg.train_config.batch_size);
    cfg.train_config.learning_rate =
        detail::get_or(t, "learning_rate", cfg.train_config.learning_rate);
    cfg.train_config.epochs = detail::get_or(t, "epochs", cfg.train_config.epochs);
    cfg.train_config.use_fusion = detail::get_or(t, "use_fusion", cfg.train_config.use_fusion);
  }
  cfg.policy_fraction = detail::get_or(j, "policy_fraction", cfg.policy_fraction);
  cfg.run_tag = detail::get_or<std::string>(j, "run_tag", cfg.run_tag);
  cfg.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.seed);
  return cfg;
}

inline void validate_config(const PipelineConfig& cfg) {
  auto must_exist = [](const std::string& path, const char* what) {
    if (!fs::exists(path)) {
      throw ConfigError(std::string(what) + " path does not exist: " + path);
    }
  };
  must_exist(cfg.corpus_path, "corpus");
  must_exist(cfg.queries_path, "queries");
  must_exist(cfg.qrels_path, "qrels");
  must_exist(cfg.eval_queries_path, "eval_queries");
  must_exist(cfg.eval_qrels_path, "eval_qrels");
  if (cfg.workdir.empty()) throw ConfigError("workdir must be set");
  if (cfg.dim < 2) throw ConfigError("encoder.dim must be >= 2");
  if (cfg.min_freq < 1) throw ConfigError("encoder.min_freq must be >= 1");
  if (cfg.generator_kind != "template" && cfg.generator_kind != "external") {
    throw ConfigError("generator.kind must be 'template' or 'external'");
  }
  if (cfg.generator_kind == "external" && cfg.endpoint.url.empty()) {
    throw ConfigError("generator.endpoint.url required for the external generator");
  }
  if (cfg.temperatures.empty()) throw ConfigError("sampling.temperatures must be non-empty");
  for (double t : cfg.temperatures) {
    if (!(t > 0.0)) throw ConfigError("sampling temperatures must be > 0");
  }
  if (cfg.samples_per_temp < 1) throw ConfigError("sampling.samples_per_temp must be >= 1");
  if (cfg.filter_threshold < -1.0 || cfg.filter_threshold > 1.0) {
    throw ConfigError("filter_threshold must lie in [-1, 1]");
  }
  if (cfg.dpo_config.beta <= 0.0) throw ConfigError("dpo.beta must be > 0");
  if (cfg.dpo_config.margin < 0.0) throw ConfigError("dpo.margin must be >= 0");
  if (cfg.train_config.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (cfg.policy_fraction < 0.0 || cfg.policy_fraction > 1.0) {
    throw ConfigError("policy_fraction must lie in [0, 1]");
  }
}

/// Canonical resolved config (all defaults materialized); its digest guards
/// stage manifests.
inline nlohmann::json resolved_config_json(const PipelineConfig& cfg) {
  nlohmann::json j;
  j["paths"] = {{"corpus", cfg.corpus_path},   {"queries", cfg.queries_path},
                {"qrels", cfg.qrels_path},     {"workdir", cfg.workdir},
                {"eval_queries", cfg.eval_queries_path},
                {"eval_qrels", cfg.eval_qrels_path}};
  j["encoder"] = {{"dim", cfg.dim},
                  {"tied", cfg.tied},
                  {"min_freq", cfg.min_freq},
                  {"init_scale", cfg.init_scale},
                  {"include_title", cfg.include_title},
                  {"encode_threads", cfg.encode_threads}};
  j["generator"] = {
      {"kind", cfg.generator_kind},
      {"template",
       {{"top_m", cfg.template_config.top_m},
        {"vary_with_temperature", cfg.template_config.vary_with_temperature}}},
      {"endpoint",
       {{"url", cfg.endpoint.url},
        {"model", cfg.endpoint.model},
        {"timeout_s", cfg.endpoint.timeout_s},
        {"max_retries", cfg.endpoint.max_retries},
        {"in_flight", cfg.endpoint.in_flight}}}};
  j["sampling"] = {{"temperatures", cfg.temperatures},
                   {"samples_per_temp", cfg.samples_per_temp}};
  j["filter_threshold"] = cfg.filter_threshold;
  j["reward_mode"] = reward::reward_mode_name(cfg.reward_mode);
  j["dpo"] = {{"beta", cfg.dpo_config.beta},
              {"margin", cfg.dpo_config.margin},
              {"strategy",
               cfg.dpo_config.strategy == dpo::PairStrategy::kMaxMin ? "max_min"
                                                                     : "all_above_margin"},
              {"learning_rate", cfg.dpo_config.learning_rate},
              {"epochs", cfg.dpo_config.epochs}};
  j["train"] = {{"batch_size", cfg.train_config.batch_size},
                {"learning_rate", cfg.train_config.learning_rate},
                {"epochs", cfg.train_config.epochs},
                {"use_fusion", cfg.train_config.use_fusion}};
  j["policy_fraction"] = cfg.policy_fraction;
  j["run_tag"] = cfg.run_tag;
  j["seed"] = cfg.seed;
  return j;
}

inline PipelineConfig load_config_file(const std::string& path,
                                       std::optional<std::uint64_t> seed_override = {},
                                       std::optional<std::string> workdir_override = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path);
  PipelineConfig cfg = parse_config(j);
  if (seed_override) cfg.seed = *seed_override;
  if (workdir_override) cfg.workdir = *workdir_override;
  validate_config(cfg);
  return cfg;
}

enum class StageOutcome { kRan, kSkipped };

struct EvalResult {
  std::string mode;
  std::string dataset;
  double ndcg10 = 0.0;
  double recall100 = 0.0;
  double mrr = 0.0;
  std::size_t queries = 0;
  retriever::EvalCounters counters;
};

inline const std::vector<std::string>& stage_order() {
  static const std::vector<std::string> kOrder = {
      "ingest",     "encode",    "expand",          "answer",
      "reward",     "build-pairs", "train-dpo",     "regenerate",
      "train-retriever", "evaluate", "report"};
  return kOrder;
}

// Binary doc-embedding matrix with ids: XPDREMB1, u32 version, u32 d, u64 N,
// N x (u32 len + id bytes), then N*d little-endian f64.
inline constexpr char kEmbeddingsMagic[8] = {'X', 'P', 'D', 'R', 'E', 'M', 'B', '1'};

inline void save_doc_embeddings(const std::vector<std::string>& doc_ids,
                                const numerics::Matrix& embeddings,
                                const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write embeddings file: " + path);
  out.write(kEmbeddingsMagic, sizeof(kEmbeddingsMagic));
  const std::uint32_t version = 1;
  const std::uint32_t d = static_cast<std::uint32_t>(embeddings.cols);
  const std::uint64_t n = embeddings.rows;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&d), sizeof(d));
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  for (const auto& id : doc_ids) {
    const std::uint32_t len = static_cast<std::uint32_t>(id.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(id.data(), len);
  }
  out.write(reinterpret_cast<const char*>(embeddings.data.data()),
            static_cast<std::streamsize>(sizeof(double) * embeddings.data.size()));
}

inline retriever::DenseIndex load_doc_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open embeddings file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kEmbeddingsMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad embeddings magic: " + path);
  }
  std::uint32_t version = 0;
  std::uint32_t d = 0;
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&d), sizeof(d));
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  if (!in || version != 1) throw std::runtime_error("bad embeddings header: " + path);
  std::vector<std::string> ids(n);
  for (auto& id : ids) {
    std::uint32_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    id.resize(len);
    in.read(id.data(), len);
  }
  numerics::Matrix m(n, d);
  in.read(reinterpret_cast<char*>(m.data.data()),
          static_cast<std::streamsize>(sizeof(double) * m.data.size()));
  if (!in) throw std::runtime_error("embeddings file truncated: " + path);
  return retriever::build_index(std::move(ids), std::move(m));
}

class PipelineRunner {
 public:
  explicit PipelineRunner(PipelineConfig cfg) : cfg_(std::move(cfg)) {
    fs::create_directories(cfg_.workdir);
    fs::create_directories(wpath("manifests"));
    // Every run keeps its resolved configuration next to its outputs.
    std::ofstream out(wpath("config_resolved.json"), std::ios::binary);
    out << resolved_config_json(cfg_).dump(2) << '\n';
  }

  const PipelineConfig& config() const { return cfg_; }

  StageOutcome run_stage(const std::string& name) {
    if (name == "ingest") return stage(name, {}, [this] { ingest(); });
    if (name == "encode") {
      return stage(name, {"corpus.jsonl", "vocab.tsv"}, [this] { encode(); });
    }
    if (name == "expand") {
      return stage(name,
                   {"corpus.jsonl", "queries.jsonl", "eval_queries.jsonl", "vocab.tsv",
                    "encoder_init.ckpt", "split.json"},
                   [this] { expand(); });
    }
    if (name == "answer") {
      return stage(name,
                   {"corpus.jsonl", "queries.jsonl", "eval_queries.jsonl", "qrels.tsv",
                    "eval_qrels.tsv"},
                   [this] { answer(); });
    }
    if (name == "reward") {
      return stage(name,
                   {"corpus.jsonl", "vocab.tsv", "encoder_init.ckpt", "expansions.jsonl",
                    "answers.jsonl", "qrels.tsv", "eval_qrels.tsv"},
                   [this] { reward_stage(); });
    }
    if (name == "build-pairs") {
      return stage(name, {"rewards.jsonl", "expansions.jsonl", "split.json",
                          "expand_summary.json"},
                   [this] { build_pairs_stage(); });
    }
    if (name == "train-dpo") {
      return stage(name, {"pairs.jsonl", "expansions.jsonl"}, [this] { train_dpo_stage(); });
    }
    if (name == "regenerate") {
      return stage(name, {"expansions.jsonl", "policy.json", "rewards.jsonl"},
                   [this] { regenerate(); });
    }
    if (name == "train-retriever") {
      return stage(name,
                   {"corpus.jsonl", "queries.jsonl", "qrels.tsv", "vocab.tsv",
                    "encoder_init.ckpt", "expansions_selected.jsonl", "split.json"},
                   [this] { train_retriever_stage(); });
    }
    if (name == "evaluate") {
      std::vector<std::string> inputs = {"corpus.jsonl", "eval_queries.jsonl",
                                         "eval_qrels.tsv", "vocab.tsv",
                                         "encoder_init.ckpt", "doc_embeddings.bin"};
      if (fs::exists(wpath("encoder_ft.ckpt"))) inputs.push_back("encoder_ft.ckpt");
      if (fs::exists(wpath("encoder_expandr.ckpt"))) {
        inputs.push_back("encoder_expandr.ckpt");
        inputs.push_back("expansions_selected.jsonl");
      }
      return stage(name, inputs, [this] { evaluate_stage(); });
    }
    if (name == "report") {
      std::vector<std::string> inputs = {"corpus.jsonl", "vocab.tsv", "expansions.jsonl",
                                         "expansions_selected.jsonl", "answers.jsonl",
                                         "qrels.tsv", "eval_qrels.tsv",
                                         "eval_queries.jsonl", "encoder_init.ckpt"};
      if (fs::exists(wpath("encoder_expandr.ckpt"))) inputs.push_back("encoder_expandr.ckpt");
      return stage(name, inputs, [this] { report_stage(); });
    }
    if (name == "export-dpo-pairs") {
      return stage(name, {"pairs.jsonl", "queries.jsonl"}, [this] { export_pairs_stage(); });
    }
    throw ConfigError("unknown stage '" + name + "'");
  }

  void run_all() {
    for (const auto& name : stage_order()) run_stage(name);
  }

  /// Table-2-style evaluation for one mode; requires that mode's checkpoint.
  EvalResult evaluate_run(const std::string& mode) {
    if (mode != "raw" && mode != "ft" && mode != "expandr") {
      throw ConfigError("evaluate mode must be raw, ft, or expandr");
    }
    const auto vocab = corpus::load_vocabulary(wpath("vocab.tsv"));
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto eval_queries = corpus::load_queries(wpath("eval_queries.jsonl"));
    auto qrels = corpus::load_qrels(wpath("eval_qrels.tsv"));

    encoder::DualEncoderParams params = load_mode_params(mode, vocab);
    retriever::DenseIndex index;
    if (mode == "raw") {
      index = load_doc_embeddings(wpath("doc_embeddings.bin"));
    } else {
      index = build_corpus_index(params, docs, vocab);
    }

    // Fusion at inference mirrors the training configuration: ft encodes the
    // raw query, expandr fuses the selected expansion (unless fusion is
    // disabled, which makes the two modes coincide by definition).
    const bool use_fusion = mode == "expandr" && cfg_.train_config.use_fusion;
    std::map<std::string, std::vector<int>> expansion_tokens;
    if (use_fusion) {
      for (const auto& row : expansion::load_expansions(wpath("expansions_selected.jsonl"))) {
        if (!row.candidates.empty()) {
          expansion_tokens[row.query_id] = corpus::tokenize(row.candidates[0].text, vocab);
        }
      }
    }

    EvalResult result;
    result.mode = mode;
    result.dataset = fs::path(cfg_.eval_queries_path).stem().string();
    qrels = retriever::prune_dangling(qrels, index.doc_ids, &result.counters);

    std::vector<retriever::RankedList> runs;
    double ndcg_sum = 0.0;
    double recall_sum = 0.0;
    std::size_t recall_n = 0;
    double mrr_sum = 0.0;
    for (const auto& q : eval_queries) {
      numerics::Vec qvec = encoder::encode_query(params, corpus::tokenize(q.text, vocab));
      if (use_fusion) {
        auto it = expansion_tokens.find(q.id);
        if (it != expansion_tokens.end()) {
          // Expansion joins the query representation: query-side encoding.
          const numerics::Vec evec =
              encoder::detail::mean_pool(params.query_table, it->second);
          qvec = fusion::fuse(qvec, evec);
        }
      }
      retriever::RankedList run = retriever::search(index, qvec, 100, q.id);
      ndcg_sum += retriever::ndcg_at_k(run, qrels, 10, retriever::DcgGain::kLinear,
                                       &result.counters);
      if (auto r = retriever::recall_at_k(run, qrels, 100, &result.counters)) {
        recall_sum += *r;
        ++recall_n;
      }
      mrr_sum += retriever::mrr(run, qrels);
      runs.push_back(std::move(run));
    }
    result.queries = eval_queries.size();
    if (!eval_queries.empty()) {
      result.ndcg10 = ndcg_sum / static_cast<double>(eval_queries.size());
      result.mrr = mrr_sum / static_cast<double>(eval_queries.size());
    }
    if (recall_n > 0) result.recall100 = recall_sum / static_cast<double>(recall_n);
    retriever::save_trec_run(runs, wpath("run_" + mode + ".trec"), cfg_.run_tag + "-" + mode);
    write_metrics(result);
    return result;
  }

  std::string wpath(const std::string& rel) const {
    return (fs::path(cfg_.workdir) / rel).string();
  }

 private:
  using StageFn = std::function<void()>;

  StageOutcome stage(const std::string& name, const std::vector<std::string>& inputs,
                     const StageFn& body) {
    for (const auto& rel : inputs) {
      if (!fs::exists(wpath(rel))) {
        throw UpstreamError("stage '" + name + "' is missing input '" + rel +
                            "'; run stage '" + producer_of(rel) + "' first");
      }
    }
    std::map<std::string, std::string> input_digests;
    for (const auto& rel : inputs) {
      input_digests[rel] = digest::to_hex(digest::digest_file(wpath(rel)));
    }
    const std::string config_digest =
        digest::to_hex(digest::fnv1a64(resolved_config_json(cfg_).dump()));
    const std::string manifest_path = wpath("manifests/" + name + ".json");
    if (manifest_matches(manifest_path, config_digest, input_digests)) {
      std::cout << "[" << name << "] outputs up to date, skipped\n";
      return StageOutcome::kSkipped;
    }
    outputs_.clear();
    body();
    nlohmann::json manifest;
    manifest["stage"] = name;
    manifest["config_digest"] = config_digest;
    manifest["seed"] = cfg_.seed;
    manifest["inputs"] = input_digests;
    nlohmann::json outs = nlohmann::json::object();
    for (const auto& rel : outputs_) {
      outs[rel] = digest::to_hex(digest::digest_file(wpath(rel)));
    }
    manifest["outputs"] = std::move(outs);
    std::ofstream out(manifest_path, std::ios::binary);
    out << manifest.dump(2) << '\n';
    std::cout << "[" << name << "] done\n";
    return StageOutcome::kRan;
  }

  bool manifest_matches(const std::string& manifest_path, const std::string& config_digest,
                        const std::map<std::string, std::string>& input_digests) const {
    if (!fs::exists(manifest_path)) return false;
    std::ifstream in(manifest_path);
    nlohmann::json m = nlohmann::json::parse(in, nullptr, false);
    if (m.is_discarded()) return false;
    if (detail::get_or<std::string>(m, "config_digest", "") != config_digest) return false;
    if (detail::get_or<std::uint64_t>(m, "seed", cfg_.seed + 1) != cfg_.seed) return false;
    if (!m.contains("inputs") || !m.at("inputs").is_object()) return false;
    const auto& stored = m.at("inputs");
    if (stored.size() != input_digests.size()) return false;
    for (const auto& [rel, hex] : input_digests) {
      if (!stored.contains(rel) || stored.at(rel).get<std::string>() != hex) return false;
    }
    if (!m.contains("outputs") || !m.at("outputs").is_object()) return false;
    for (const auto& [rel, hex] : m.at("outputs").items()) {
      const std::string path = wpath(rel);
      if (!fs::exists(path)) return false;
      if (digest::to_hex(digest::digest_file(path)) != hex.get<std::string>()) return false;
    }
    return true;
  }

  static std::string producer_of(const std::string& rel) {
    static const std::map<std::string, std::string> kProducers = {
        {"corpus.jsonl", "ingest"},         {"queries.jsonl", "ingest"},
        {"eval_queries.jsonl", "ingest"},   {"qrels.tsv", "ingest"},
        {"eval_qrels.tsv", "ingest"},       {"vocab.tsv", "ingest"},
        {"split.json", "ingest"},           {"encoder_init.ckpt", "encode"},
        {"doc_embeddings.bin", "encode"},   {"expansions.jsonl", "expand"},
        {"expand_summary.json", "expand"},  {"answers.jsonl", "answer"},
        {"rewards.jsonl", "reward"},        {"pairs.jsonl", "build-pairs"},
        {"policy.json", "train-dpo"},       {"expansions_selected.jsonl", "regenerate"},
        {"encoder_ft.ckpt", "train-retriever"},
        {"encoder_expandr.ckpt", "train-retriever"},
    };
    auto it = kProducers.find(rel);
    return it == kProducers.end() ? std::string("ingest") : it->second;
  }

  void record_output(const std::string& rel) { outputs_.push_back(rel); }

  // ---- stage bodies -------------------------------------------------------

  void ingest() {
    const auto docs = corpus::load_corpus(cfg_.corpus_path);
    const auto queries = corpus::load_queries(cfg_.queries_path);
    const auto qrels = corpus::load_qrels(cfg_.qrels_path);
    const auto eval_queries = corpus::load_queries(cfg_.eval_queries_path);
    const auto eval_qrels = corpus::load_qrels(cfg_.eval_qrels_path);

    // The vocabulary covers every text the pipeline may encode.
    std::vector<corpus::Query> all_queries = queries;
    std::set<std::string> train_ids;
    for (const auto& q : queries) train_ids.insert(q.id);
    for (const auto& q : eval_queries) {
      if (train_ids.count(q.id) == 0) all_queries.push_back(q);
    }
    const auto vocab = corpus::build_vocabulary(docs, all_queries, cfg_.min_freq);

    corpus::save_corpus(docs, wpath("corpus.jsonl"));
    corpus::save_queries(queries, wpath("queries.jsonl"));
    corpus::save_qrels(qrels, wpath("qrels.tsv"));
    corpus::save_queries(eval_queries, wpath("eval_queries.jsonl"));
    corpus::save_qrels(eval_qrels, wpath("eval_qrels.tsv"));
    corpus::save_vocabulary(vocab, wpath("vocab.tsv"));

    // Policy/retriever query split: seeded shuffle, disjoint by construction.
    std::vector<std::string> ids;
    for (const auto& q : queries) ids.push_back(q.id);
    numerics::Rng rng(cfg_.seed, digest::fnv1a64("split"));
    rng.shuffle(ids);
    const auto n_policy = static_cast<std::size_t>(
        std::llround(cfg_.policy_fraction * static_cast<double>(ids.size())));
    std::vector<std::string> policy_ids(ids.begin(), ids.begin() + std::min(n_policy, ids.size()));
    std::vector<std::string> retriever_ids(ids.begin() + std::min(n_policy, ids.size()),
                                           ids.end());
    std::sort(policy_ids.begin(), policy_ids.end());
    std::sort(retriever_ids.begin(), retriever_ids.end());
    nlohmann::json split;
    split["policy"] = policy_ids;
    split["retriever"] = retriever_ids;
    std::ofstream out(wpath("split.json"), std::ios::binary);
    out << split.dump(2) << '\n';

    record_output("corpus.jsonl");
    record_output("queries.jsonl");
    record_output("qrels.tsv");
    record_output("eval_queries.jsonl");
    record_output("eval_qrels.tsv");
    record_output("vocab.tsv");
    record_output("split.json");
  }

  void encode() {
    const auto vocab = corpus::load_vocabulary(wpath("vocab.tsv"));
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto params = encoder::init_params(vocab.size(), cfg_.dim, cfg_.tied, cfg_.seed,
                                             cfg_.init_scale);
    encoder::save_checkpoint(params, vocab.hash(), wpath("encoder_init.ckpt"));
    const auto index = build_corpus_index(params, docs, vocab);
    save_doc_embeddings(index.doc_ids, index.embeddings, wpath("doc_embeddings.bin"));
    record_output("encoder_init.ckpt");
    record_output("doc_embeddings.bin");
  }

  void expand() {
    const auto vocab = corpus::load_vocabulary(wpath("vocab.tsv"));
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto queries = all_pipeline_queries();
    const auto params = load_init_params(vocab);
    const auto split = load_split();

    expansion::Generator& generator = make_generator(docs);
    const auto q2d = expansion::default_q2d_template();

    std::vector<expansion::QueryExpansions> rows;
    std::vector<std::pair<std::string, std::string>> failures;
    int retries_before = external_retries();
    numerics::Rng rng(cfg_.seed, digest::fnv1a64("expand"));

    const std::function<std::vector<expansion::ExpansionCandidate>(std::size_t)> work =
        [&](std::size_t i) {
          numerics::Rng qrng = rng.split(i + 1);
          return expansion::sample_candidates(generator, queries[i].id, queries[i].text, q2d,
                                              cfg_.temperatures, cfg_.samples_per_temp, qrng);
        };
    const int in_flight = cfg_.generator_kind == "external" ? cfg_.endpoint.in_flight : 1;
    auto results = external::run_bounded<std::vector<expansion::ExpansionCandidate>>(
        queries.size(), in_flight, work);
    for (std::size_t i = 0; i < queries.size(); ++i) {
      if (results[i].ok()) {
        rows.push_back({queries[i].id, std::move(*results[i].value)});
      } else {
        failures.emplace_back(queries[i].id, results[i].error);
      }
    }
    expansion::save_expansions(rows, wpath("expansions.jsonl"));
    {
      std::ofstream out(wpath("expansion_failures.jsonl"), std::ios::binary);
      for (const auto& [qid, err] : failures) {
        nlohmann::json j;
        j["query_id"] = qid;
        j["error"] = err;
        out << j.dump() << '\n';
      }
    }

    // Low-similarity filter over the policy split (query-side encodings on
    // both sides; the expansion acts as query material).
    std::set<std::string> policy_ids(split.policy.begin(), split.policy.end());
    std::map<std::string, numerics::Vec> query_vecs;
    std::map<std::string, std::vector<numerics::Vec>> cand_vecs;
    for (const auto& q : queries) {
      if (policy_ids.count(q.id) == 0) continue;
      query_vecs[q.id] = encoder::encode_query(params, corpus::tokenize(q.text, vocab));
    }
    for (const auto& row : rows) {
      if (policy_ids.count(row.query_id) == 0) continue;
      auto& vecs = cand_vecs[row.query_id];
      for (const auto& c : row.candidates) {
        vecs.push_back(encoder::detail::mean_pool(params.query_table,
                                                  corpus::tokenize(c.text, vocab)));
      }
    }
    const auto retained = expansion::filter_queries(cand_vecs, query_vecs,
                                                    cfg_.filter_threshold);
    nlohmann::json summary;
    summary["retained_policy"] = std::vector<std::string>(retained.begin(), retained.end());
    summary["policy_total"] = cand_vecs.size();
    summary["retention_ratio"] =
        cand_vecs.empty() ? 1.0
                          : static_cast<double>(retained.size()) /
                                static_cast<double>(cand_vecs.size());
    summary["failures"] = failures.size();
    summary["retries"] = external_retries() - retries_before;
    generator_.reset();
    external_generator_ = nullptr;
    std::ofstream out(wpath("expand_summary.json"), std::ios::binary);
    out << summary.dump(2) << '\n';

    record_output("expansions.jsonl");
    record_output("expansion_failures.jsonl");
    record_output("expand_summary.json");
  }

  void answer() {
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto queries = all_pipeline_queries();
    const auto gold = gold_docs(docs);
    expansion::Generator& generator = make_generator(docs);
    const auto q2a = expansion::default_q2a_template();
    std::vector<reward::AnswerRecord> answers;
    int empty_generations = 0;
    int missing_gold = 0;
    int failures = 0;
    for (const auto& q : queries) {
      auto it = gold.find(q.id);
      if (it == gold.end()) {
        ++missing_gold;
        continue;
      }
      std::optional<reward::AnswerRecord> rec;
      try {
        rec = reward::generate_answer(generator, q.id, q.text, it->second->text, q2a);
      } catch (const std::exception&) {
        ++failures;  // the query simply drops out of self-reward
        continue;
      }
      if (!rec) {
        ++empty_generations;
        continue;
      }
      answers.push_back(std::move(*rec));
    }
    generator_.reset();
    external_generator_ = nullptr;
    reward::save_answers(answers, wpath("answers.jsonl"));
    nlohmann::json summary;
    summary["answers"] = answers.size();
    summary["empty_generations"] = empty_generations;
    summary["missing_gold"] = missing_gold;
    summary["failures"] = failures;
    std::ofstream out(wpath("answer_summary.json"), std::ios::binary);
    out << summary.dump(2) << '\n';
    record_output("answers.jsonl");
    record_output("answer_summary.json");
  }

  void reward_stage() {
    const auto vocab = corpus::load_vocabulary(wpath("vocab.tsv"));
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto params = load_init_params(vocab);
    const auto gold = gold_docs(docs);
    const auto expansions = expansion::load_expansions(wpath("expansions.jsonl"));
    std::map<std::string, std::string> answers;
    for (const auto& a : reward::load_answers(wpath("answers.jsonl"))) {
      answers[a.query_id] = a.answer_text;
    }
    std::vector<reward::RewardRecord> records;
    for (const auto& row : expansions) {
      if (row.candidates.empty()) continue;
      auto git = gold.find(row.query_id);
      auto ait = answers.find(row.query_id);
      if (git == gold.end() || ait == answers.end()) continue;
      std::vector<numerics::Vec> cand_vecs;
      for (const auto& c : row.candidates) {
        // Candidates are passage-like: document-side encoding for ranking.
        cand_vecs.push_back(encoder::encode_doc(params, corpus::tokenize(c.text, vocab)));
      }
      // The answer is used as a query; the gold document as a pseudo-query
      // in document space.
      const numerics::Vec answer_vec =
          encoder::encode_query(params, corpus::tokenize(ait->second, vocab));
      const numerics::Vec gold_vec =
          encoder::encode_doc(params, doc_token_ids(*git->second, vocab));
      auto r_self = reward::self_reward(answer_vec, cand_vecs);
      auto r_ret = reward::retriever_reward(gold_vec, cand_vecs);
      auto combined = reward::combine_with_mode(row.query_id, std::move(r_self),
                                                std::move(r_ret), cfg_.reward_mode);
      records.insert(records.end(), combined.begin(), combined.end());
    }
    reward::save_rewards(records, wpath("rewards.jsonl"));
    record_output("rewards.jsonl");
  }

  void build_pairs_stage() {
    const auto rewards = reward::load_rewards(wpath("rewards.jsonl"));
    const auto expansions = expansion::load_expansions(wpath("expansions.jsonl"));
    const auto split = load_split();
    const auto summary = load_json(wpath("expand_summary.json"));
    std::set<std::string> retained;
    for (const auto& id : summary.at("retained_policy")) {
      retained.insert(id.get<std::string>());
    }
    std::set<std::string> policy_ids(split.policy.begin(), split.policy.end());

    std::map<std::string, std::vector<reward::RewardRecord>> rewards_by_query;
    for (const auto& r : rewards) {
      if (policy_ids.count(r.query_id) != 0 && retained.count(r.query_id) != 0) {
        rewards_by_query[r.query_id].push_back(r);
      }
    }
    std::map<std::string, std::vector<std::string>> texts_by_query;
    for (const auto& row : expansions) {
      std::vector<std::string> texts;
      for (const auto& c : row.candidates) texts.push_back(c.text);
      texts_by_query[row.query_id] = std::move(texts);
    }
    const auto result = dpo::build_pairs(rewards_by_query, texts_by_query, cfg_.dpo_config);
    dpo::save_pairs(result.pairs, wpath("pairs.jsonl"));
    nlohmann::json psummary;
    psummary["pairs"] = result.pairs.size();
    psummary["skipped_queries"] = result.skipped_queries;
    std::ofstream out(wpath("pairs_summary.json"), std::ios::binary);
    out << psummary.dump(2) << '\n';
    record_output("pairs.jsonl");
    record_output("pairs_summary.json");
  }

  void train_dpo_stage() {
    const auto pairs = dpo::load_pairs(wpath("pairs.jsonl"));
    const auto expansions = expansion::load_expansions(wpath("expansions.jsonl"));
    std::map<std::string, std::vector<std::string>> texts_by_query;
    for (const auto& row : expansions) {
      std::vector<std::string> texts;
      for (const auto& c : row.candidates) texts.push_back(c.text);
      texts_by_query[row.query_id] = std::move(texts);
    }
    expansion::ToyPolicy policy;
    for (const auto& p : pairs) {
      if (policy.by_query.count(p.query_id) == 0) {
        auto it = texts_by_query.find(p.query_id);
        if (it == texts_by_query.end()) {
          throw UpstreamError("train-dpo: pair query '" + p.query_id +
                              "' has no expansion candidates");
        }
        policy.by_query.emplace(p.query_id, expansion::make_policy_entry(it->second));
      }
    }
    std::vector<double> trace;
    if (!pairs.empty()) {
      numerics::Rng rng(cfg_.seed, digest::fnv1a64("train-dpo"));
      trace = dpo::train_dpo(policy, pairs, cfg_.dpo_config, rng).epoch_mean_loss;
    } else {
      std::cout << "[train-dpo] no preference pairs; policy left untrained\n";
    }
    dpo::save_policy(policy, wpath("policy.json"));
    contrastive::save_loss_trace(trace, wpath("dpo_loss_trace.csv"));
    record_output("policy.json");
    record_output("dpo_loss_trace.csv");
  }

  void regenerate() {
    const auto expansions = expansion::load_expansions(wpath("expansions.jsonl"));
    const auto policy = dpo::load_policy(wpath("policy.json"));
    std::map<std::string, std::vector<reward::RewardRecord>> rewards_by_query;
    for (const auto& r : reward::load_rewards(wpath("rewards.jsonl"))) {
      rewards_by_query[r.query_id].push_back(r);
    }
    // Selection per query: trained policy argmax when available, otherwise
    // the highest-reward candidate, otherwise the first; ties by index.
    std::vector<expansion::QueryExpansions> selected;
    for (const auto& row : expansions) {
      if (row.candidates.empty()) continue;
      std::size_t pick = 0;
      std::string source = row.candidates[0].source;
      if (const auto* entry = policy.entry(row.query_id); entry != nullptr) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < entry->logits.size(); ++i) {
          if (entry->logits[i] > entry->logits[best]) best = i;
        }
        pick = best;
        source = "toy_policy";
      } else if (auto it = rewards_by_query.find(row.query_id);
                 it != rewards_by_query.end()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < it->second.size(); ++i) {
          if (it->second[i].r_total > it->second[best].r_total) best = i;
        }
        pick = best;
      }
      if (pick >= row.candidates.size()) pick = 0;
      expansion::ExpansionCandidate c = row.candidates[pick];
      c.source = source;
      selected.push_back({row.query_id, {std::move(c)}});
    }
    expansion::save_expansions(selected, wpath("expansions_selected.jsonl"));
    record_output("expansions_selected.jsonl");
  }

  void train_retriever_stage() {
    const auto vocab = corpus::load_vocabulary(wpath("vocab.tsv"));
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto queries = corpus::load_queries(wpath("queries.jsonl"));
    const auto gold = gold_docs(docs);
    const auto split = load_split();
    const auto params = load_init_params(vocab);
    std::map<std::string, std::vector<int>> selected_tokens;
    for (const auto& row : expansion::load_expansions(wpath("expansions_selected.jsonl"))) {
      if (!row.candidates.empty()) {
        selected_tokens[row.query_id] = corpus::tokenize(row.candidates[0].text, vocab);
      }
    }
    std::set<std::string> retriever_ids(split.retriever.begin(), split.retriever.end());
    std::vector<contrastive::TrainRow> dataset;
    for (const auto& q : queries) {
      if (retriever_ids.count(q.id) == 0) continue;
      auto git = gold.find(q.id);
      if (git == gold.end()) continue;
      contrastive::TrainRow row;
      row.query_tokens = corpus::tokenize(q.text, vocab);
      auto sit = selected_tokens.find(q.id);
      // A missing expansion degrades to fusion identity.
      row.expansion_tokens = sit != selected_tokens.end() ? sit->second : row.query_tokens;
      row.doc_tokens = doc_token_ids(*git->second, vocab);
      dataset.push_back(std::move(row));
    }
    if (dataset.empty()) {
      throw UpstreamError("train-retriever: no training rows (check qrels and split)");
    }

    contrastive::TrainConfig ft_config = cfg_.train_config;
    ft_config.seed = numerics::Rng(cfg_.seed, digest::fnv1a64("train-retriever")).next_u64();
    ft_config.use_fusion = false;
    const auto ft = contrastive::train_retriever(params, dataset, ft_config);
    encoder::save_checkpoint(ft.params, vocab.hash(), wpath("encoder_ft.ckpt"));
    contrastive::save_loss_trace(ft.epoch_mean_loss, wpath("loss_trace_ft.csv"));

    contrastive::TrainConfig ex_config = ft_config;
    ex_config.use_fusion = cfg_.train_config.use_fusion;
    const auto ex = contrastive::train_retriever(params, dataset, ex_config);
    encoder::save_checkpoint(ex.params, vocab.hash(), wpath("encoder_expandr.ckpt"));
    contrastive::save_loss_trace(ex.epoch_mean_loss, wpath("loss_trace_expandr.csv"));

    record_output("encoder_ft.ckpt");
    record_output("loss_trace_ft.csv");
    record_output("encoder_expandr.ckpt");
    record_output("loss_trace_expandr.csv");
  }

  void evaluate_stage() {
    // Raw always runs; trained modes run when their checkpoints exist.
    evaluate_run("raw");
    record_output("metrics_raw.csv");
    record_output("metrics_raw.txt");
    record_output("run_raw.trec");
    if (fs::exists(wpath("encoder_ft.ckpt"))) {
      evaluate_run("ft");
      record_output("metrics_ft.csv");
      record_output("metrics_ft.txt");
      record_output("run_ft.trec");
    }
    if (fs::exists(wpath("encoder_expandr.ckpt"))) {
      evaluate_run("expandr");
      record_output("metrics_expandr.csv");
      record_output("metrics_expandr.txt");
      record_output("run_expandr.trec");
    }
  }

  void report_stage() {
    const auto vocab = corpus::load_vocabulary(wpath("vocab.tsv"));
    const auto docs = corpus::load_corpus(wpath("corpus.jsonl"));
    const auto gold = gold_docs(docs);
    const auto expansions = expansion::load_expansions(wpath("expansions.jsonl"));
    const auto selected = expansion::load_expansions(wpath("expansions_selected.jsonl"));
    std::map<std::string, std::string> answers;
    for (const auto& a : reward::load_answers(wpath("answers.jsonl"))) {
      answers[a.query_id] = a.answer_text;
    }

    struct VariantTexts {
      std::map<std::string, std::string> by_query;
    };
    std::map<std::string, VariantTexts> variants;
    for (const auto& row : expansions) {
      if (!row.candidates.empty()) {
        variants["first_candidate"].by_query[row.query_id] = row.candidates[0].text;
      }
    }
    for (const auto& row : selected) {
      if (!row.candidates.empty()) {
        variants["selected"].by_query[row.query_id] = row.candidates[0].text;
      }
    }

    std::vector<std::tuple<std::string, std::string, double>> rows;
    std::map<std::string, std::vector<std::string>> lengths_input;
    for (const auto& [variant, texts] : variants) {
      double bleu_ans_sum = 0.0;
      std::size_t bleu_ans_n = 0;
      double bleu_gold_sum = 0.0;
      std::size_t bleu_gold_n = 0;
      for (const auto& [qid, text] : texts.by_query) {
        lengths_input[variant].push_back(text);
        if (auto it = answers.find(qid); it != answers.end()) {
          bleu_ans_sum += report::bleu_similarity(text, it->second);
          ++bleu_ans_n;
        }
        if (auto it = gold.find(qid); it != gold.end()) {
          bleu_gold_sum += report::bleu_similarity(text, it->second->text);
          ++bleu_gold_n;
        }
      }
      if (bleu_ans_n > 0) {
        rows.emplace_back(variant, "bleu2_vs_answer",
                          bleu_ans_sum / static_cast<double>(bleu_ans_n));
      }
      if (bleu_gold_n > 0) {
        rows.emplace_back(variant, "bleu2_vs_gold",
                          bleu_gold_sum / static_cast<double>(bleu_gold_n));
      }
    }
    for (const auto& [variant, mean] : report::length_stats(lengths_input)) {
      if (mean) rows.emplace_back(variant, "mean_token_length", *mean);
    }
    std::sort(rows.begin(), rows.end());
    report::save_report_csv(rows, wpath("report.csv"));

    // 2-D projection of eval queries (fused when possible) and their gold
    // documents, under the strongest available encoder.
    const bool trained = fs::exists(wpath("encoder_expandr.ckpt"));
    const auto params =
        trained ? encoder::load_checkpoint(wpath("encoder_expandr.ckpt"), vocab.hash()).params
                : load_init_params(vocab);
    std::map<std::string, std::vector<int>> selected_tokens;
    for (const auto& row : selected) {
      if (!row.candidates.empty()) {
        selected_tokens[row.query_id] = corpus::tokenize(row.candidates[0].text, vocab);
      }
    }
    const auto eval_queries = corpus::load_queries(wpath("eval_queries.jsonl"));
    std::vector<numerics::Vec> points;
    std::vector<std::pair<std::string, std::string>> labels;  // (id, kind)
    for (const auto& q : eval_queries) {
      numerics::Vec qvec = encoder::encode_query(params, corpus::tokenize(q.text, vocab));
      if (auto it = selected_tokens.find(q.id); it != selected_tokens.end()) {
        qvec = fusion::fuse(qvec,
                            encoder::detail::mean_pool(params.query_table, it->second));
      }
      points.push_back(std::move(qvec));
      labels.emplace_back(q.id, "query");
      if (auto git = gold.find(q.id); git != gold.end()) {
        points.push_back(encoder::encode_doc(params, doc_token_ids(*git->second, vocab)));
        labels.emplace_back(git->second->id, "doc");
      }
    }
    std::vector<std::tuple<std::string, std::string, double, double>> proj_rows;
    if (points.size() >= 2) {
      const auto projection = report::project_2d(points);
      for (std::size_t i = 0; i < points.size(); ++i) {
        proj_rows.emplace_back(labels[i].first, labels[i].second,
                               projection.points[i][0], projection.points[i][1]);
      }
    }
    report::save_projection_csv(proj_rows, wpath("projection.csv"));
    record_output("report.csv");
    record_output("projection.csv");
  }

  void export_pairs_stage() {
    const auto pairs = dpo::load_pairs(wpath("pairs.jsonl"));
    const auto queries = corpus::load_queries(wpath("queries.jsonl"));
    std::map<std::string, std::string> texts;
    for (const auto& q : queries) texts[q.id] = q.text;
    dpo::export_pairs(pairs, texts, expansion::default_q2d_template(),
                      wpath("pairs_export.jsonl"));
    record_output("pairs_export.jsonl");
  }

  // ---- shared helpers ------------------------------------------------------

  struct Split {
    std::vector<std::string> policy;
    std::vector<std::string> retriever;
  };

  Split load_split() const {
    const auto j = load_json(wpath("split.json"));
    Split split;
    split.policy = j.at("policy").get<std::vector<std::string>>();
    split.retriever = j.at("retriever").get<std::vector<std::string>>();
    return split;
  }

  static nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return nlohmann::json::parse(in);
  }

  std::vector<corpus::Query> all_pipeline_queries() const {
    auto queries = corpus::load_queries(wpath("queries.jsonl"));
    std::set<std::string> seen;
    for (const auto& q : queries) seen.insert(q.id);
    for (const auto& q : corpus::load_queries(wpath("eval_queries.jsonl"))) {
      if (seen.count(q.id) == 0) queries.push_back(q);
    }
    return queries;
  }

  std::vector<int> doc_token_ids(const corpus::Document& doc,
                                 const corpus::Vocabulary& vocab) const {
    if (!cfg_.include_title || doc.title.empty()) return corpus::tokenize(doc.text, vocab);
    return corpus::tokenize(doc.title + " " + doc.text, vocab);
  }

  /// Highest grade wins, ties by lexicographically smallest doc id; the doc
  /// must exist in the corpus.
  std::map<std::string, const corpus::Document*> gold_docs(
      const std::vector<corpus::Document>& docs) const {
    std::map<std::string, const corpus::Document*> by_id;
    for (const auto& d : docs) by_id.emplace(d.id, &d);
    std::map<std::string, const corpus::Document*> gold;
    auto scan = [&](const corpus::Qrels& qrels) {
      for (const auto& [qid, per_query] : qrels.entries) {
        const corpus::Document* best = nullptr;
        int best_grade = 0;
        for (const auto& [did, grade] : per_query) {
          if (grade <= 0) continue;
          auto it = by_id.find(did);
          if (it == by_id.end()) continue;
          if (grade > best_grade ||
              (grade == best_grade && best != nullptr && did < best->id)) {
            best = it->second;
            best_grade = grade;
          }
        }
        if (best != nullptr) gold.emplace(qid, best);
      }
    };
    scan(corpus::load_qrels(wpath("qrels.tsv")));
    scan(corpus::load_qrels(wpath("eval_qrels.tsv")));
    return gold;
  }

  encoder::DualEncoderParams load_init_params(const corpus::Vocabulary& vocab) const {
    return encoder::load_checkpoint(wpath("encoder_init.ckpt"), vocab.hash()).params;
  }

  encoder::DualEncoderParams load_mode_params(const std::string& mode,
                                              const corpus::Vocabulary& vocab) const {
    std::string rel;
    if (mode == "raw") {
      rel = "encoder_init.ckpt";
    } else if (mode == "ft") {
      rel = "encoder_ft.ckpt";
    } else {
      rel = "encoder_expandr.ckpt";
    }
    if (!fs::exists(wpath(rel))) {
      throw UpstreamError("evaluate mode '" + mode + "' needs checkpoint '" + rel +
                          "'; run stage '" + producer_of(rel) + "' first");
    }
    return encoder::load_checkpoint(wpath(rel), vocab.hash()).params;
  }

  retriever::DenseIndex build_corpus_index(const encoder::DualEncoderParams& params,
                                           const std::vector<corpus::Document>& docs,
                                           const corpus::Vocabulary& vocab) const {
    std::vector<std::vector<int>> token_lists;
    std::vector<std::string> ids;
    token_lists.reserve(docs.size());
    ids.reserve(docs.size());
    for (const auto& d : docs) {
      token_lists.push_back(doc_token_ids(d, vocab));
      ids.push_back(d.id);
    }
    auto embeddings = encoder::encode_corpus(params, token_lists, cfg_.encode_threads);
    return retriever::build_index(std::move(ids), std::move(embeddings));
  }

  /// Ownership stays with the runner so retry counters survive the stage.
  expansion::Generator& make_generator(const std::vector<corpus::Document>& docs) {
    if (cfg_.generator_kind == "external") {
      auto gen = std::make_unique<external::ExternalGenerator>(cfg_.endpoint);
      external_generator_ = gen.get();
      generator_ = std::move(gen);
    } else {
      external_generator_ = nullptr;
      generator_ = std::make_unique<expansion::TemplateGenerator>(docs, cfg_.template_config);
    }
    return *generator_;
  }

  int external_retries() const {
    return external_generator_ != nullptr ? external_generator_->retries() : 0;
  }

  void write_metrics(const EvalResult& r) const {
    const std::string csv_path = wpath("metrics_" + r.mode + ".csv");
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write " + csv_path);
    char buf[64];
    auto fmt = [&buf](double v) {
      std::snprintf(buf, sizeof(buf), "%.6f", v);
      return std::string(buf);
    };
    csv << "dataset,metric,value\n";
    if (r.queries > 0) {  // an empty query set leaves an empty table
      for (const char* dataset : {r.dataset.c_str(), "avg"}) {
        csv << dataset << ",ndcg@10," << fmt(r.ndcg10) << '\n';
        csv << dataset << ",recall@100," << fmt(r.recall100) << '\n';
        csv << dataset << ",mrr," << fmt(r.mrr) << '\n';
      }
    }
    std::ofstream txt(wpath("metrics_" + r.mode + ".txt"), std::ios::binary);
    txt << "mode: " << r.mode << "  dataset: " << r.dataset << "  queries: " << r.queries
        << '\n';
    char line[160];
    std::snprintf(line, sizeof(line), "%-12s %10s\n", "metric", "value");
    txt << line;
    std::snprintf(line, sizeof(line), "%-12s %10.6f\n", "ndcg@10", r.ndcg10);
    txt << line;
    std::snprintf(line, sizeof(line), "%-12s %10.6f\n", "recall@100", r.recall100);
    txt << line;
    std::snprintf(line, sizeof(line), "%-12s %10.6f\n", "mrr", r.mrr);
    txt << line;
    std::snprintf(line, sizeof(line), "skipped: ndcg=%d recall=%d dangling_qrels=%d\n",
                  r.counters.ndcg_no_relevant, r.counters.recall_no_relevant,
                  r.counters.dangling_qrels_docs);
    txt << line;
  }

  PipelineConfig cfg_;
  std::vector<std::string> outputs_;
  std::unique_ptr<expansion::Generator> generator_;
  external::ExternalGenerator* external_generator_ = nullptr;
};

}  // namespace expandr::pipeline
