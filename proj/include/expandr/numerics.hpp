#pragma once

// Deterministic vector/scalar math, numerically stable special functions,
// a counter-based splittable RNG, and a central-difference gradient checker.
// All reductions run in index order so repeated runs are bit-identical.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace expandr::numerics {

using Vec = std::vector<double>;

/// Thrown by trainers and checkers when a computation produces NaN/Inf.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

inline double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: dimension mismatch (" +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  return dot(a.data(), b.data(), a.size());
}

inline double l2_norm(const Vec& a) {
  return std::sqrt(dot(a.data(), a.data(), a.size()));
}

/// Cosine similarity; pairs involving a zero-norm vector score 0.
inline double cosine(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine: dimension mismatch");
  }
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

/// Max-subtracted log-softmax. exp of the outputs sums to 1 within 1e-12.
inline Vec log_softmax(const Vec& scores) {
  if (scores.empty()) {
    throw std::invalid_argument("log_softmax: empty score list");
  }
  double m = scores[0];
  for (double s : scores) m = std::max(m, s);
  double sum = 0.0;
  for (double s : scores) sum += std::exp(s - m);
  const double lse = m + std::log(sum);
  Vec out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] - lse;
  return out;
}

/// Stable log(sigmoid(x)); exact -ln 2 at x == 0, no overflow for large |x|.
inline double log_sigmoid(double x) {
  if (x >= 0.0) return -std::log1p(std::exp(-x));
  return x - std::log1p(std::exp(x));
}

/// Column-major dense matrix is never needed here; row-major throughout.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double* row(std::size_t i) { return data.data() + i * cols; }
  const double* row(std::size_t i) const { return data.data() + i * cols; }

  bool same_shape(const Matrix& o) const {
    return rows == o.rows && cols == o.cols;
  }
};

/// Counter-based generator (SplitMix64 core). Identical (seed, stream) pairs
/// produce identical sequences; streams split from one seed are independent,
/// so parallel encoding never perturbs training randomness.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed + kGamma)), counter_(0) {
    if (stream != 0) key_ = mix(key_ ^ mix(stream + kGamma));
  }

  /// Derive an independent stream without advancing this generator.
  Rng split(std::uint64_t stream) const {
    Rng r = *this;
    r.key_ = mix(key_ ^ mix(stream + kGamma));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
    const std::uint64_t rem = std::numeric_limits<std::uint64_t>::max() % n;
    const std::uint64_t k = (rem + 1) % n;  // 2^64 mod n
    if (k == 0) return next_u64() % n;
    const std::uint64_t bound = static_cast<std::uint64_t>(0) - k;
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x < bound) return x % n;
    }
  }

  /// Box-Muller, one value per call (two uniforms consumed).
  double normal(double mean = 0.0, double sd = 1.0) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * r * std::cos(2.0 * kPi * u2);
  }

  /// Fisher-Yates; deterministic given this generator's state.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;
  static constexpr double kPi = 3.14159265358979323846;

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ull;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t key_;
  std::uint64_t counter_;
};

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
template <class F>
Vec finite_diff_grad(F&& f, const Vec& at, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
  Vec grad(at.size(), 0.0);
  Vec x = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    x[i] = at[i] + h;
    const double fp = f(x);
    x[i] = at[i] - h;
    const double fm = f(x);
    x[i] = at[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_diff_grad: non-finite evaluation at coordinate " +
                           std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace expandr::numerics
