#pragma once

// Expanded-query representation: the search vector is the element-wise mean
// of the raw query embedding and the expansion embedding, unnormalized. The
// equal 1/2 weighting is fixed on purpose.

#include <cmath>
#include <stdexcept>
#include <string>

#include "expandr/numerics.hpp"

namespace expandr::fusion {

using numerics::Vec;

struct FusedQuery {
  std::string query_id;
  Vec raw_vec;
  Vec expansion_vec;
  Vec fused_vec;  // (raw + expansion) / 2, element-wise
};

/// Element-wise mean. `normalize_inputs` (ablation flag, default off)
/// L2-normalizes both inputs before averaging; zero vectors pass through.
inline Vec fuse(const Vec& raw_vec, const Vec& expansion_vec,
                bool normalize_inputs = false) {
  if (raw_vec.size() != expansion_vec.size()) {
    throw std::invalid_argument("fuse: dimension mismatch (" +
                                std::to_string(raw_vec.size()) + " vs " +
                                std::to_string(expansion_vec.size()) + ")");
  }
  Vec a = raw_vec;
  Vec b = expansion_vec;
  if (normalize_inputs) {
    const double na = numerics::l2_norm(a);
    const double nb = numerics::l2_norm(b);
    if (na > 0.0) {
      for (double& v : a) v /= na;
    }
    if (nb > 0.0) {
      for (double& v : b) v /= nb;
    }
  }
  Vec fused(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) fused[i] = (a[i] + b[i]) / 2.0;
  return fused;
}

inline FusedQuery fuse_query(std::string query_id, Vec raw_vec, Vec expansion_vec,
                             bool normalize_inputs = false) {
  FusedQuery fq;
  fq.fused_vec = fuse(raw_vec, expansion_vec, normalize_inputs);
  fq.query_id = std::move(query_id);
  fq.raw_vec = std::move(raw_vec);
  fq.expansion_vec = std::move(expansion_vec);
  return fq;
}

/// Diagnostic decomposition of the joint log-likelihood; reported, never
/// optimized directly.
inline double joint_loglik(double retrieval_logprob, double generation_logprob) {
  if (!std::isfinite(retrieval_logprob) || !std::isfinite(generation_logprob)) {
    throw std::invalid_argument("joint_loglik: log-probabilities must be finite");
  }
  if (retrieval_logprob > 0.0 || generation_logprob > 0.0) {
    throw std::invalid_argument("joint_loglik: log-probabilities must be <= 0");
  }
  return retrieval_logprob + generation_logprob;
}

}  // namespace expandr::fusion
