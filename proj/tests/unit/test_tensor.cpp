#include <gtest/gtest.h>

#include <cmath>

#include "vlmprobe/error.hpp"
#include "vlmprobe/rng.hpp"
#include "vlmprobe/tensor.hpp"

namespace vlmprobe {
namespace {

Vector random_vector(Rng& rng, std::size_t n, double lo, double hi) {
  Vector v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

TEST(Softmax, SymmetricPair) {
  const Vector p = softmax(Vector{0.0, 0.0});
  EXPECT_EQ(p[0], 0.5);
  EXPECT_EQ(p[1], 0.5);
}

TEST(Softmax, ConstantLogitsAreUniform) {
  for (double c : {-1e3, -7.5, 0.0, 3.0, 1e3}) {
    for (double p : softmax(Vector{c, c, c, c})) EXPECT_EQ(p, 0.25) << "c=" << c;
  }
}

TEST(Softmax, MatchesHighPrecisionValues) {
  // exp(k) / (e + e^2 + e^3), evaluated at 30 digits.
  const Vector p = softmax(Vector{1.0, 2.0, 3.0});
  EXPECT_NEAR(p[0], 0.090030573170380457998, 1e-15);
  EXPECT_NEAR(p[1], 0.24472847105479765247, 1e-15);
  EXPECT_NEAR(p[2], 0.66524095577482188953, 1e-15);
}

TEST(Softmax, EmptyInputThrows) {
  try {
    softmax(Vector{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "empty logits");
  }
}

TEST(Softmax, SumsToOneOnRandomInputs) {
  Rng rng(11);
  for (std::size_t n : {1, 2, 3, 17, 128, 1000, 4096}) {
    for (int trial = 0; trial < 8; ++trial) {
      const Vector p = softmax(random_vector(rng, n, -50.0, 50.0));
      double sum = 0.0;
      for (double x : p) {
        EXPECT_GT(x, 0.0);
        sum += x;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12) << "n=" << n;
    }
  }
}

TEST(Softmax, InvariantToConstantShift) {
  Rng rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const Vector x = random_vector(rng, 1 + rng.below(300), -50.0, 50.0);
    const double c = rng.uniform(-500.0, 500.0);
    Vector shifted = x;
    for (double& v : shifted) v += c;
    const Vector a = softmax(x);
    const Vector b = softmax(shifted);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(RmsNorm, AlreadyUnitRms) {
  EXPECT_EQ(rms_norm(Vector{1, 1, 1, 1}, 0.0), (Vector{1, 1, 1, 1}));
  EXPECT_EQ(rms_norm(Vector{2, 2}, 0.0), (Vector{1, 1}));
}

TEST(RmsNorm, ThreeFour) {
  // 3 / sqrt(12.5) and 4 / sqrt(12.5)
  const Vector out = rms_norm(Vector{3, 4}, 0.0);
  EXPECT_NEAR(out[0], 0.84852813742385702928, 1e-15);
  EXPECT_NEAR(out[1], 1.131370849898476039, 1e-15);
}

TEST(RmsNorm, AppliesGainAndEps) {
  const Vector out = rms_norm(Vector{3, 4}, 0.5, Vector{2.0, -1.0});
  const double denom = std::sqrt(12.5 + 0.5);
  EXPECT_DOUBLE_EQ(out[0], 2.0 * 3.0 / denom);
  EXPECT_DOUBLE_EQ(out[1], -4.0 / denom);
}

TEST(RmsNorm, GainLengthMismatchThrows) {
  EXPECT_THROW(rms_norm(Vector{1, 2, 3}, 1e-6, Vector{1, 1}), Error);
}

TEST(RmsNorm, Idempotent) {
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector v = random_vector(rng, 1 + rng.below(200), -30.0, 30.0);
    const Vector once = rms_norm(v, 0.0);
    const Vector twice = rms_norm(once, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(once[i], twice[i], 1e-12);
    EXPECT_NEAR(rms(once), 1.0, 1e-12);
  }
}

TEST(L2Norm, SmallCases) {
  EXPECT_EQ(l2_norm(Vector{0, 0, 0}), 0.0);
  EXPECT_EQ(l2_norm(Vector{3, 4}), 5.0);
  EXPECT_EQ(l2_norm(Vector{1, 1, 1, 1}), 2.0);
  EXPECT_THROW(l2_norm(Vector{}), Error);
}

TEST(L2Norm, NoOverflowOrUnderflow) {
  EXPECT_DOUBLE_EQ(l2_norm(Vector{3e200, 4e200}), 5e200);
  EXPECT_DOUBLE_EQ(l2_norm(Vector{3e-200, 4e-200}), 5e-200);
}

TEST(L2Norm, Homogeneous) {
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const Vector v = random_vector(rng, 1 + rng.below(64), -10.0, 10.0);
    const double c = rng.uniform(-100.0, 100.0);
    const double expected = std::abs(c) * l2_norm(v);
    EXPECT_NEAR(l2_norm(scale(v, c)), expected, 1e-12 * std::max(1.0, expected));
  }
}

TEST(Matrix, ShapeChecks) {
  EXPECT_THROW(Matrix(2, 3, std::vector<double>(5)), Error);
  const Matrix m(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(m(1, 2), 6.0);
  EXPECT_EQ(m.top_rows(1), Matrix::from_rows({{1, 2, 3}}));
}

TEST(Matrix, ProductsMatchHandValues) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{5, 6}, {7, 8}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{19, 22}, {43, 50}}));
  EXPECT_EQ(vec_mat(Vector{1, 1}, b), (Vector{12, 14}));
  EXPECT_EQ(matmul(a, Matrix::identity(2)), a);
  EXPECT_THROW(matmul(a, Matrix(3, 2)), Error);
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(5);
  Rng b(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_EQ(u, b.uniform());
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(a.below(7), 7u);
    b.below(7);
  }
  EXPECT_NE(Rng::derive(1, 0), Rng::derive(1, 1));
  EXPECT_NE(Rng::derive(1, 0), Rng::derive(2, 0));
}

}  // namespace
}  // namespace vlmprobe
