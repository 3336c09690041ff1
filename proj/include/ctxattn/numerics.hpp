#pragma once

// Dense row-major matrices of doubles, stable softmax / log-sum-exp,
// cross-entropy and a seeded SplitMix64 generator. Everything else in the
// library is built on these few kernels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ctxattn {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    Matrix m;
    m.rows_ = rows.size();
    m.cols_ = rows.size() ? rows.begin()->size() : 0;
    m.data_.reserve(m.rows_ * m.cols_);
    for (const auto& r : rows) {
      if (r.size() != m.cols_) throw Error("from_rows: ragged rows");
      m.data_.insert(m.data_.end(), r.begin(), r.end());
    }
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  void resize(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, 0.0);
  }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_finite(std::span<const double> v, std::string_view what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << what << ": non-finite value " << v[i] << " at index " << i;
      throw Error(os.str());
    }
  }
}

inline void require_finite(const Matrix& m, std::string_view what) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (!std::isfinite(m(r, c))) {
        std::ostringstream os;
        os << what << ": non-finite value " << m(r, c) << " at (" << r << ", " << c << ")";
        throw Error(os.str());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Products. `accumulate` variants add into an existing output.

// out += a * b
inline void matmul_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k || out.rows() != n || out.cols() != m) throw Error("matmul: shape mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict o = out.data() + i * m;
    const double* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ar[p];
      if (s == 0.0) continue;
      const double* __restrict br = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * br[j];
    }
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  matmul_acc(a, b, out);
  return out;
}

// out += a * b^T
inline void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  if (b.cols() != k || out.rows() != n || out.cols() != m) throw Error("matmul_nt: shape mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    const double* __restrict ar = a.data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* __restrict br = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) += s;
    }
  }
}

inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.rows());
  matmul_nt_acc(a, b, out);
  return out;
}

// out += a^T * b
inline void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& out) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != n || out.rows() != k || out.cols() != m) throw Error("matmul_tn: shape mismatch");
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.data() + i * k;
    const double* __restrict br = b.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = ar[p];
      if (s == 0.0) continue;
      double* __restrict o = out.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += s * br[j];
    }
  }
}

inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  Matrix out(a.cols(), b.cols());
  matmul_tn_acc(a, b, out);
  return out;
}

// Adds a 1 x cols bias row to every row of m.
inline void add_row_bias(Matrix& m, const Matrix& bias) {
  if (bias.rows() != 1 || bias.cols() != m.cols()) throw Error("add_row_bias: shape mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias(0, c);
  }
}

// bias_grad += column sums of g
inline void column_sums_acc(const Matrix& g, Matrix& bias_grad) {
  for (std::size_t r = 0; r < g.rows(); ++r) {
    auto row = g.row(r);
    for (std::size_t c = 0; c < g.cols(); ++c) bias_grad(0, c) += row[c];
  }
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw Error("add_inplace: shape mismatch");
  double* __restrict p = a.data();
  const double* __restrict q = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) p[i] += q[i];
}

// ---------------------------------------------------------------------------
// Reductions.

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw Error("log_sum_exp: empty reduction");
  require_finite(v, "log_sum_exp");
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

// Softmax of `in` restricted to entries with valid[j] != 0; invalid entries
// get probability 0. An empty valid mask means every entry is valid.
inline void softmax_masked(std::span<const double> in, std::span<const std::uint8_t> valid,
                           std::span<double> out) {
  const bool all = valid.empty();
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < in.size(); ++j)
    if (all || valid[j]) mx = std::max(mx, in[j]);
  if (!std::isfinite(mx)) throw Error("softmax: row has no attendable entry");
  double s = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    if (all || valid[j]) {
      out[j] = std::exp(in[j] - mx);
      s += out[j];
    } else {
      out[j] = 0.0;
    }
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < in.size(); ++j) out[j] *= inv;
}

inline Matrix softmax_rows(const Matrix& m) {
  require_finite(m, "softmax_rows");
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) softmax_masked(m.row(r), {}, out.row(r));
  return out;
}

// Mean over rows of -log softmax(row)[target].
inline double cross_entropy(const Matrix& logits, std::span<const std::size_t> targets) {
  if (targets.size() != logits.rows()) throw Error("cross_entropy: one target per row required");
  if (targets.empty()) throw Error("cross_entropy: empty reduction");
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] >= logits.cols()) {
      std::ostringstream os;
      os << "cross_entropy: target " << targets[r] << " out of range for " << logits.cols()
         << " classes (row " << r << ")";
      throw Error(os.str());
    }
    // lse - x_t rewritten as (max - x_t) + log1p(sum of the non-max terms),
    // which keeps full precision when the target is confidently predicted.
    const auto row = logits.row(r);
    require_finite(row, "cross_entropy");
    const auto top = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    double rest = 0.0;
    for (std::size_t j = 0; j < row.size(); ++j)
      if (j != top) rest += std::exp(row[j] - row[top]);
    total += (row[top] - row[targets[r]]) + std::log1p(rest);
  }
  return total / static_cast<double>(logits.rows());
}

// ---------------------------------------------------------------------------
// SplitMix64 (Steele, Lea & Flood 2014): state advances by the 64-bit golden
// gamma 0x9E3779B97F4A7C15 and each output is the standard three-step mix.
// Integer and uniform draws are bit-exact across platforms; normal() goes
// through libm log/cos.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased by rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw Error("Rng::below: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller (one draw per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

  // Independent named stream derived from this generator's seed.
  Rng substream(std::string_view name) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
    Rng mixer(seed_ ^ h);
    return Rng(mixer.next_u64());
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace ctxattn
