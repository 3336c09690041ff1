#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "ctxattn/numerics.hpp"

using namespace ctxattn;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = scale * rng.uniform(-1.0, 1.0);
  return m;
}

Matrix naive_product(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += static_cast<long double>(a(i, p)) * b(p, j);
      out(i, j) = static_cast<double>(s);
    }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

}  // namespace

TEST(Matrix, ProductsAgreeWithNaiveLoops) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6);
    const Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m);
    const Matrix ref = naive_product(a, b);
    const Matrix p1 = matmul(a, b);
    const Matrix p2 = matmul_nt(a, transpose(b));
    const Matrix p3 = matmul_tn(transpose(a), b);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(p1.data()[i], ref.data()[i], 1e-14);
      EXPECT_NEAR(p2.data()[i], ref.data()[i], 1e-14);
      EXPECT_NEAR(p3.data()[i], ref.data()[i], 1e-14);
    }
  }
}

TEST(Matrix, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), Error);
  EXPECT_THROW(matmul_nt(Matrix(2, 3), Matrix(2, 2)), Error);
  EXPECT_THROW(matmul_tn(Matrix(2, 3), Matrix(3, 2)), Error);
}

TEST(Softmax, LargeLogitsMatchLongDoubleReference) {
  const Matrix m = Matrix::from_rows({{1000.0, 1001.0}});
  const Matrix z = softmax_rows(m);
  const long double e = std::exp(-1.0L);
  EXPECT_NEAR(z(0, 0), static_cast<double>(e / (1.0L + e)), 1e-15);
  EXPECT_NEAR(z(0, 1), static_cast<double>(1.0L / (1.0L + e)), 1e-15);
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreZero) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    std::vector<double> in(n), out(n);
    std::vector<std::uint8_t> valid(n);
    for (std::size_t j = 0; j < n; ++j) {
      in[j] = rng.uniform(-30.0, 30.0);
      valid[j] = rng.uniform() < 0.7;
    }
    valid[rng.below(n)] = 1;
    softmax_masked(in, valid, out);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!valid[j]) {
        EXPECT_EQ(out[j], 0.0);
      }
      EXPECT_GE(out[j], 0.0);
      s += out[j];
    }
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Softmax, RejectsNonFiniteInput) {
  EXPECT_THROW(softmax_rows(Matrix::from_rows({{1.0, NAN}})), Error);
  EXPECT_THROW(softmax_rows(Matrix::from_rows({{INFINITY, 0.0}})), Error);
}

TEST(LogSumExp, MatchesNaiveSumWhereThatIsSafe) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + rng.below(12));
    for (double& x : v) x = rng.uniform(-20.0, 20.0);
    long double s = 0;
    for (double x : v) s += std::exp(static_cast<long double>(x));
    EXPECT_NEAR(log_sum_exp(v), static_cast<double>(std::log(s)), 1e-12);
  }
}

TEST(LogSumExp, StableForHugeValuesAndRejectsEmpty) {
  const std::vector<double> v{1e308, 1e308};
  EXPECT_DOUBLE_EQ(log_sum_exp(v), 1e308 + std::log(2.0));
  EXPECT_THROW(log_sum_exp(std::vector<double>{}), Error);
}

TEST(CrossEntropy, TinyLossForConfidentPrediction) {
  const Matrix logits = Matrix::from_rows({{10.0, -10.0}});
  const std::vector<std::size_t> t{0};
  const double expected = static_cast<double>(std::log1p(std::exp(-20.0L)));
  EXPECT_NEAR(cross_entropy(logits, t), expected, 1e-22);
  EXPECT_NEAR(cross_entropy(logits, t), 2.0611536e-9, 1e-16);
}

TEST(CrossEntropy, OutOfRangeTargetNamesTheProblem) {
  const Matrix logits = Matrix::from_rows({{0.0, 1.0}});
  const std::vector<std::size_t> t{2};
  try {
    cross_entropy(logits, t);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("out of range"), std::string::npos);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  const Matrix logits(3, 5);
  const std::vector<std::size_t> t{0, 3, 4};
  EXPECT_NEAR(cross_entropy(logits, t), std::log(5.0), 1e-15);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(123), b(123);
  for (int i = 0; i < 100000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, SplitMixReferenceValues) {
  // First outputs of SplitMix64 seeded with 0, as published with the
  // reference implementation.
  Rng r(0);
  EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(r.next_u64(), 0x06C45D188009454FULL);
}

TEST(Rng, SubstreamsAreDistinctAndStable) {
  const Rng root(5);
  Rng a = root.substream("corpus"), b = root.substream("init"), c = root.substream("corpus");
  const auto x = a.next_u64();
  EXPECT_NE(x, b.next_u64());
  EXPECT_EQ(x, c.next_u64());
}

TEST(Rng, BelowStaysInRangeAndCoversIt) {
  Rng r(9);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = r.below(7);
    ASSERT_LT(v, 7u);
    ++seen[v];
  }
  for (int c : seen) EXPECT_GT(c, 800);
}

TEST(Rng, NormalHasUnitMoments) {
  Rng r(21);
  double s = 0, s2 = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng r(4);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  r.shuffle(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}
