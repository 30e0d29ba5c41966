#pragma once

// Contrastive retriever training: the fused-query InfoNCE loss with in-batch
// negatives, its exact analytic gradient through the mean-pooled encoders,
// and a deterministic gradient-descent loop.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "expandr/encoder.hpp"
#include "expandr/fusion.hpp"
#include "expandr/numerics.hpp"

namespace expandr::contrastive {

using encoder::DualEncoderParams;
using numerics::Matrix;
using numerics::Rng;
using numerics::Vec;

/// One training triple: the query, its expansion, and its positive document,
/// all as token id lists.
struct TrainRow {
  std::vector<int> query_tokens;
  std::vector<int> expansion_tokens;
  std::vector<int> doc_tokens;
};

struct TrainConfig {
  int batch_size = 32;
  double learning_rate = 0.05;
  int epochs = 3;
  std::uint64_t seed = 0;
  bool use_fusion = true;
};

/// Dense per-table gradients; doc stays empty for tied parameters (every
/// contribution folds into the single shared table).
struct EncoderGrads {
  Matrix query;
  Matrix doc;
};

namespace detail {

struct BatchForward {
  std::vector<Vec> fused;    // per row: fused or raw query vector
  std::vector<Vec> queries;  // raw query vectors
  std::vector<Vec> expans;   // expansion vectors (query-side encoding)
  std::vector<Vec> docs;     // positive document vectors
  std::vector<Vec> log_probs;  // per row, over batch documents
  double loss = 0.0;
};

inline BatchForward forward(const DualEncoderParams& params,
                            const std::vector<TrainRow>& batch, bool use_fusion) {
  if (batch.size() < 2) {
    throw std::invalid_argument("infonce: batch must hold at least 2 rows for "
                                "in-batch negatives");
  }
  BatchForward f;
  const std::size_t b = batch.size();
  f.queries.reserve(b);
  f.docs.reserve(b);
  for (const auto& row : batch) {
    f.queries.push_back(encoder::encode_query(params, row.query_tokens));
    f.docs.push_back(encoder::encode_doc(params, row.doc_tokens));
    if (use_fusion) {
      // The expansion joins the query representation, so it is encoded with
      // the query tower.
      f.expans.push_back(
          encoder::detail::mean_pool(params.query_table, row.expansion_tokens));
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    f.fused.push_back(use_fusion ? fusion::fuse(f.queries[i], f.expans[i])
                                 : f.queries[i]);
  }
  double loss_sum = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    Vec sims(b);
    for (std::size_t j = 0; j < b; ++j) sims[j] = numerics::dot(f.fused[i], f.docs[j]);
    f.log_probs.push_back(numerics::log_softmax(sims));
    loss_sum += -f.log_probs.back()[i];
  }
  f.loss = loss_sum / static_cast<double>(b);
  return f;
}

inline void scatter_mean_grad(Matrix& table_grad, const std::vector<int>& token_ids,
                              const Vec& upstream, double coeff) {
  if (token_ids.empty()) return;
  const double scale = coeff / static_cast<double>(token_ids.size());
  for (int id : token_ids) {
    double* row = table_grad.row(static_cast<std::size_t>(id));
    for (std::size_t j = 0; j < upstream.size(); ++j) row[j] += scale * upstream[j];
  }
}

}  // namespace detail

/// Mean over rows of -log softmax(sims)[positive], where row i's positive is
/// document i and its negatives are the other in-batch documents.
inline double infonce_loss(const DualEncoderParams& params,
                           const std::vector<TrainRow>& batch, bool use_fusion) {
  return detail::forward(params, batch, use_fusion).loss;
}

/// Exact gradient of infonce_loss over both embedding tables. Rows of
/// tokens absent from the batch stay exactly zero.
inline EncoderGrads infonce_grad(const DualEncoderParams& params,
                                 const std::vector<TrainRow>& batch, bool use_fusion) {
  const auto f = detail::forward(params, batch, use_fusion);
  const std::size_t b = batch.size();
  const std::size_t d = params.dim();
  EncoderGrads grads;
  grads.query = Matrix(params.vocab_size(), d);
  if (!params.tied) grads.doc = Matrix(params.vocab_size(), d);
  Matrix& doc_grad = params.tied ? grads.query : grads.doc;

  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<Vec> d_fused(b, Vec(d, 0.0));
  std::vector<Vec> d_doc(b, Vec(d, 0.0));
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double g = inv_b * (std::exp(f.log_probs[i][j]) - (i == j ? 1.0 : 0.0));
      for (std::size_t t = 0; t < d; ++t) {
        d_fused[i][t] += g * f.docs[j][t];
        d_doc[j][t] += g * f.fused[i][t];
      }
    }
  }
  const double query_coeff = use_fusion ? 0.5 : 1.0;
  for (std::size_t i = 0; i < b; ++i) {
    detail::scatter_mean_grad(grads.query, batch[i].query_tokens, d_fused[i], query_coeff);
    if (use_fusion) {
      detail::scatter_mean_grad(grads.query, batch[i].expansion_tokens, d_fused[i], 0.5);
    }
    detail::scatter_mean_grad(doc_grad, batch[i].doc_tokens, d_doc[i], 1.0);
  }
  return grads;
}

struct TrainRetrieverResult {
  DualEncoderParams params;
  std::vector<double> epoch_mean_loss;
};

/// Seeded shuffle each epoch, consecutive batches, serialized updates.
/// Trailing partial batches run when they still hold >= 2 rows.
inline TrainRetrieverResult train_retriever(DualEncoderParams params,
                                            const std::vector<TrainRow>& dataset,
                                            const TrainConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("train_retriever: empty dataset");
  if (config.batch_size < 2) {
    throw std::invalid_argument("train_retriever: batch_size must be >= 2");
  }
  TrainRetrieverResult result;
  Rng rng(config.seed);
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      if (end - start < 2) break;  // a 1-row remainder has no negatives
      std::vector<TrainRow> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(dataset[order[i]]);
      const double loss = infonce_loss(params, batch, config.use_fusion);
      if (!std::isfinite(loss)) {
        throw numerics::NumericalError("train_retriever: non-finite loss in batch " +
                                       std::to_string(batches) + " of epoch " +
                                       std::to_string(epoch));
      }
      const EncoderGrads grads = infonce_grad(params, batch, config.use_fusion);
      for (std::size_t i = 0; i < params.query_table.data.size(); ++i) {
        params.query_table.data[i] -= config.learning_rate * grads.query.data[i];
      }
      if (!params.tied) {
        for (std::size_t i = 0; i < params.doc_table.data.size(); ++i) {
          params.doc_table.data[i] -= config.learning_rate * grads.doc.data[i];
        }
      }
      loss_sum += loss;
      ++batches;
    }
    result.epoch_mean_loss.push_back(batches == 0 ? 0.0
                                                  : loss_sum / static_cast<double>(batches));
  }
  result.params = std::move(params);
  return result;
}

/// Loss trace file: CSV `epoch,mean_loss`.
inline void save_loss_trace(const std::vector<double>& trace, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write loss trace: " + path);
  out << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.12f", trace[i]);
    out << i << ',' << buf << '\n';
  }
}

}  // namespace expandr::contrastive
