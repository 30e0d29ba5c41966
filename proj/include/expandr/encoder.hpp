#pragma once

// Tiny trainable dual encoder: token-embedding lookup with mean pooling on
// each tower. Untied by default (separate query/doc tables); tied mode keeps
// a single table for both sides.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "expandr/digest.hpp"
#include "expandr/numerics.hpp"

namespace expandr::encoder {

using numerics::Matrix;
using numerics::Rng;
using numerics::Vec;

struct DualEncoderParams {
  Matrix query_table;  // V x d
  Matrix doc_table;    // V x d; empty when tied
  bool tied = false;

  std::size_t vocab_size() const { return query_table.rows; }
  std::size_t dim() const { return query_table.cols; }

  const Matrix& doc() const { return tied ? query_table : doc_table; }
  Matrix& doc() { return tied ? query_table : doc_table; }
};

/// Random-normal initialization; the query and doc tables draw from split
/// streams so tied/untied runs stay comparable row by row.
inline DualEncoderParams init_params(std::size_t vocab_size, std::size_t dim,
                                     bool tied, std::uint64_t seed,
                                     double scale = 0.1) {
  if (dim < 2) throw std::invalid_argument("init_params: dim must be >= 2");
  DualEncoderParams params;
  params.tied = tied;
  params.query_table = Matrix(vocab_size, dim);
  Rng base(seed);
  Rng qs = base.split(1);
  for (double& v : params.query_table.data) v = qs.normal(0.0, scale);
  if (!tied) {
    params.doc_table = Matrix(vocab_size, dim);
    Rng ds = base.split(2);
    for (double& v : params.doc_table.data) v = ds.normal(0.0, scale);
  }
  return params;
}

namespace detail {

inline Vec mean_pool(const Matrix& table, const std::vector<int>& token_ids) {
  Vec out(table.cols, 0.0);
  if (token_ids.empty()) return out;  // stopword-only queries encode to zero
  for (int id : token_ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows) {
      throw std::out_of_range("encode: token id " + std::to_string(id) +
                              " out of range for vocab size " +
                              std::to_string(table.rows));
    }
    const double* row = table.row(static_cast<std::size_t>(id));
    for (std::size_t j = 0; j < table.cols; ++j) out[j] += row[j];
  }
  const double inv = 1.0 / static_cast<double>(token_ids.size());
  for (double& v : out) v *= inv;
  return out;
}

}  // namespace detail

inline Vec encode_query(const DualEncoderParams& params,
                        const std::vector<int>& token_ids) {
  return detail::mean_pool(params.query_table, token_ids);
}

inline Vec encode_doc(const DualEncoderParams& params,
                      const std::vector<int>& token_ids) {
  return detail::mean_pool(params.doc(), token_ids);
}

/// Row i is encode_doc of document i. Each row is independent, so chunked
/// threads produce a matrix bit-identical to the serial one.
inline Matrix encode_corpus(const DualEncoderParams& params,
                            const std::vector<std::vector<int>>& docs,
                            int n_threads = 1) {
  Matrix out(docs.size(), params.dim());
  auto encode_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const Vec v = encode_doc(params, docs[i]);
      std::memcpy(out.row(i), v.data(), sizeof(double) * v.size());
    }
  };
  if (n_threads <= 1 || docs.size() < 2) {
    encode_range(0, docs.size());
    return out;
  }
  const std::size_t workers = std::min<std::size_t>(n_threads, docs.size());
  const std::size_t chunk = (docs.size() + workers - 1) / workers;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(docs.size(), begin + chunk);
    if (begin >= end) break;
    threads.emplace_back(encode_range, begin, end);
  }
  for (auto& t : threads) t.join();
  return out;
}

// Checkpoint layout: magic XPDRENC1, format_version u32, d u32, V u64,
// tied u8, vocab_hash u64, then row-major f64 tables (query, then doc when
// untied). Little-endian throughout.
inline constexpr char kCheckpointMagic[8] = {'X', 'P', 'D', 'R', 'E', 'N', 'C', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EncoderCheckpoint {
  DualEncoderParams params;
  std::uint64_t vocab_hash = 0;
  std::uint32_t format_version = kCheckpointVersion;
};

namespace detail {

template <class T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::ifstream& in, T& v, const std::string& path) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint truncated or unreadable: " + path);
}

}  // namespace detail

inline void save_checkpoint(const DualEncoderParams& params,
                            std::uint64_t vocab_hash, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint32_t>(params.dim()));
  detail::write_pod(out, static_cast<std::uint64_t>(params.vocab_size()));
  detail::write_pod(out, static_cast<std::uint8_t>(params.tied ? 1 : 0));
  detail::write_pod(out, vocab_hash);
  auto write_table = [&out](const Matrix& m) {
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(sizeof(double) * m.data.size()));
  };
  write_table(params.query_table);
  if (!params.tied) write_table(params.doc_table);
  if (!out) throw std::runtime_error("short write on checkpoint: " + path);
}

inline EncoderCheckpoint load_checkpoint(const std::string& path,
                                         std::uint64_t expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("bad checkpoint magic: " + path);
  }
  EncoderCheckpoint ckpt;
  detail::read_pod(in, ckpt.format_version, path);
  if (ckpt.format_version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint format_version mismatch: expected " +
                             std::to_string(kCheckpointVersion) + ", found " +
                             std::to_string(ckpt.format_version) + " in " + path);
  }
  std::uint32_t dim = 0;
  std::uint64_t vocab = 0;
  std::uint8_t tied = 0;
  detail::read_pod(in, dim, path);
  detail::read_pod(in, vocab, path);
  detail::read_pod(in, tied, path);
  detail::read_pod(in, ckpt.vocab_hash, path);
  if (ckpt.vocab_hash != expected_vocab_hash) {
    throw std::runtime_error("checkpoint vocab hash mismatch: checkpoint has " +
                             digest::to_hex(ckpt.vocab_hash) + ", current vocabulary has " +
                             digest::to_hex(expected_vocab_hash));
  }
  ckpt.params.tied = tied != 0;
  auto read_table = [&in, &path](Matrix& m, std::size_t rows, std::size_t cols) {
    m = Matrix(rows, cols);
    in.read(reinterpret_cast<char*>(m.data.data()),
            static_cast<std::streamsize>(sizeof(double) * m.data.size()));
    if (!in) throw std::runtime_error("checkpoint truncated or unreadable: " + path);
  };
  read_table(ckpt.params.query_table, vocab, dim);
  if (!ckpt.params.tied) read_table(ckpt.params.doc_table, vocab, dim);
  return ckpt;
}

}  // namespace expandr::encoder
