#pragma once

// Analysis artifacts: BLEU-style text similarity between expansions and
// answers/gold documents, per-variant length statistics, and a 2-D PCA
// export for embedding plots.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "expandr/corpus.hpp"
#include "expandr/numerics.hpp"

namespace expandr::report {

using numerics::Vec;

/// BLEU-max_n with clipped counts and an add-1 floor: an order's precision
/// is m/h when matches exist and 1/(h+1) otherwise, so disjoint texts score
/// near zero instead of exactly zero. Orders longer than the candidate are
/// skipped; the brevity penalty handles short candidates.
inline double bleu_similarity(const std::string& candidate, const std::string& reference,
                              int max_n = 2, int* warn_counter = nullptr) {
  if (max_n < 1) throw std::invalid_argument("bleu_similarity: max_n must be >= 1");
  const auto cand = corpus::raw_tokens(candidate);
  const auto ref = corpus::raw_tokens(reference);
  if (ref.empty()) {
    if (warn_counter != nullptr) ++(*warn_counter);
    return 0.0;
  }
  if (cand.empty()) return 0.0;

  double log_sum = 0.0;
  int used_orders = 0;
  for (int n = 1; n <= max_n; ++n) {
    if (cand.size() < static_cast<std::size_t>(n)) break;
    std::map<std::vector<std::string>, int> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) {
      ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
    }
    std::map<std::vector<std::string>, int> cand_counts;
    std::size_t total = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      ++cand_counts[std::vector<std::string>(cand.begin() + i, cand.begin() + i + n)];
      ++total;
    }
    std::size_t matched = 0;
    for (const auto& [gram, count] : cand_counts) {
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) {
        matched += std::min(count, it->second);
      }
    }
    const double precision =
        matched > 0 ? static_cast<double>(matched) / static_cast<double>(total)
                    : 1.0 / static_cast<double>(total + 1);
    log_sum += std::log(precision);
    ++used_orders;
  }
  if (used_orders == 0) return 0.0;
  const double geo_mean = std::exp(log_sum / used_orders);
  const double bp = cand.size() >= ref.size()
                        ? 1.0
                        : std::exp(1.0 - static_cast<double>(ref.size()) /
                                             static_cast<double>(cand.size()));
  return geo_mean * bp;
}

inline std::size_t whitespace_token_count(const std::string& text) {
  std::size_t count = 0;
  bool in_token = false;
  for (char ch : text) {
    const bool space = std::isspace(static_cast<unsigned char>(ch)) != 0;
    if (!space && !in_token) ++count;
    in_token = !space;
  }
  return count;
}

/// Mean whitespace-token length per variant; empty variants report absent
/// rather than zero.
inline std::map<std::string, std::optional<double>> length_stats(
    const std::map<std::string, std::vector<std::string>>& texts_by_variant) {
  std::map<std::string, std::optional<double>> out;
  for (const auto& [variant, texts] : texts_by_variant) {
    if (texts.empty()) {
      out[variant] = std::nullopt;
      continue;
    }
    double sum = 0.0;
    for (const auto& t : texts) sum += static_cast<double>(whitespace_token_count(t));
    out[variant] = sum / static_cast<double>(texts.size());
  }
  return out;
}

struct Projection2d {
  std::vector<std::array<double, 2>> points;
  bool rank_deficient = false;  // second direction vanished
};

namespace detail {

// Power iteration on the (small) covariance matrix; deterministic start.
// When `orthogonal_to` is given, every iterate is re-projected off it, so
// the result stays orthonormal to the first direction even if the deflated
// matrix keeps a residual component along it.
inline Vec dominant_eigenvector(const numerics::Matrix& cov, double* eigenvalue,
                                const Vec* orthogonal_to = nullptr) {
  const std::size_t d = cov.rows;
  numerics::Rng rng(0x70726f6a32ull);  // fixed internal seed
  Vec v(d);
  for (auto& x : v) x = rng.normal();
  auto project_off = [&](Vec& x) {
    if (orthogonal_to == nullptr) return;
    const double c = numerics::dot(x, *orthogonal_to);
    for (std::size_t i = 0; i < d; ++i) x[i] -= c * (*orthogonal_to)[i];
  };
  project_off(v);
  double norm = numerics::l2_norm(v);
  if (norm < 1e-300) {
    *eigenvalue = 0.0;
    return Vec(d, 0.0);
  }
  for (auto& x : v) x /= norm;
  for (int iter = 0; iter < 20000; ++iter) {
    Vec w(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      w[i] = numerics::dot(cov.row(i), v.data(), d);
    }
    project_off(w);
    const double wn = numerics::l2_norm(w);
    if (wn < 1e-300) {  // no remaining variance in this subspace
      *eigenvalue = 0.0;
      return Vec(d, 0.0);
    }
    for (auto& x : w) x /= wn;
    // Stop once the direction itself stabilizes (sign-insensitive).
    double move_plus = 0.0;
    double move_minus = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      move_plus = std::max(move_plus, std::abs(w[i] - v[i]));
      move_minus = std::max(move_minus, std::abs(w[i] + v[i]));
    }
    v = std::move(w);
    if (std::min(move_plus, move_minus) <= 1e-14) break;
  }
  double lambda = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    lambda += v[i] * numerics::dot(cov.row(i), v.data(), d);
  }
  *eigenvalue = lambda;
  return v;
}

inline void fix_sign(Vec& v) {
  for (double x : v) {
    if (std::abs(x) > 1e-12) {
      if (x < 0.0) {
        for (auto& y : v) y = -y;
      }
      return;
    }
  }
}

}  // namespace detail

/// Center, then project onto the top-2 principal directions found by power
/// iteration with deflation. Each direction's first nonzero coordinate is
/// made positive. Rank-deficient inputs zero the second coordinate and set
/// the warning flag.
inline Projection2d project_2d(const std::vector<Vec>& vectors) {
  if (vectors.size() < 2) {
    throw std::invalid_argument("project_2d: need at least 2 vectors");
  }
  const std::size_t n = vectors.size();
  const std::size_t d = vectors[0].size();
  for (const auto& v : vectors) {
    if (v.size() != d) throw std::invalid_argument("project_2d: dimension mismatch");
  }
  Vec mean(d, 0.0);
  for (const auto& v : vectors) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += v[j];
  }
  for (auto& m : mean) m /= static_cast<double>(n);

  numerics::Matrix cov(d, d);
  for (const auto& v : vectors) {
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = v[a] - mean[a];
      double* row = cov.row(a);
      for (std::size_t b = 0; b < d; ++b) row[b] += xa * (v[b] - mean[b]);
    }
  }
  for (auto& x : cov.data) x /= static_cast<double>(n);
  const double total_var = [&cov, d] {
    double t = 0.0;
    for (std::size_t i = 0; i < d; ++i) t += cov.row(i)[i];
    return t;
  }();

  double lambda1 = 0.0;
  Vec v1 = detail::dominant_eigenvector(cov, &lambda1);
  Projection2d out;
  out.points.assign(n, {0.0, 0.0});
  if (lambda1 <= 1e-12 * std::max(1.0, total_var)) {
    out.rank_deficient = true;  // all points coincide
    return out;
  }
  detail::fix_sign(v1);

  numerics::Matrix deflated = cov;
  for (std::size_t a = 0; a < d; ++a) {
    double* row = deflated.row(a);
    for (std::size_t b = 0; b < d; ++b) row[b] -= lambda1 * v1[a] * v1[b];
  }
  double lambda2 = 0.0;
  Vec v2 = detail::dominant_eigenvector(deflated, &lambda2, &v1);
  const bool have_second = lambda2 > 1e-12 * std::max(1.0, total_var);
  if (have_second) {
    detail::fix_sign(v2);
  } else {
    out.rank_deficient = true;
  }

  for (std::size_t i = 0; i < n; ++i) {
    double x = 0.0;
    double y = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = vectors[i][j] - mean[j];
      x += c * v1[j];
      if (have_second) y += c * v2[j];
    }
    out.points[i] = {x, y};
  }
  return out;
}

/// Report: CSV `variant,metric,value`; absent metrics are skipped.
inline void save_report_csv(
    const std::vector<std::tuple<std::string, std::string, double>>& rows,
    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report file: " + path);
  out << "variant,metric,value\n";
  char buf[64];
  for (const auto& [variant, metric, value] : rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", value);
    out << variant << ',' << metric << ',' << buf << '\n';
  }
}

/// Projection: CSV `id,kind,x,y` with kind in {query, doc}.
inline void save_projection_csv(
    const std::vector<std::tuple<std::string, std::string, double, double>>& rows,
    const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write projection file: " + path);
  out << "id,kind,x,y\n";
  char bx[64];
  char by[64];
  for (const auto& [id, kind, x, y] : rows) {
    std::snprintf(bx, sizeof(bx), "%.9f", x);
    std::snprintf(by, sizeof(by), "%.9f", y);
    out << id << ',' << kind << ',' << bx << ',' << by << '\n';
  }
}

}  // namespace expandr::report
