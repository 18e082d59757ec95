#pragma once

// Dense float64 primitives shared by every module. Row-major storage.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace vlmprobe {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_rows(const std::vector<Vector>& rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  void set_row(std::size_t r, std::span<const double> values);

  /// First `count` rows as a new matrix.
  Matrix top_rows(std::size_t count) const;

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline constexpr double kDefaultRmsEps = 1e-6;

/// Max-subtracted softmax. Throws on empty input.
Vector softmax(std::span<const double> logits);

/// gain_i * v_i / sqrt(mean(v^2) + eps). An empty gain means unit gain.
Vector rms_norm(std::span<const double> v, double eps = kDefaultRmsEps,
                std::span<const double> gain = {});

double l2_norm(std::span<const double> v);
double rms(std::span<const double> v);
double dot(std::span<const double> a, std::span<const double> b);

/// Row vector times matrix: out_j = sum_i v_i * m(i, j).
Vector vec_mat(std::span<const double> v, const Matrix& m);
Matrix matmul(const Matrix& a, const Matrix& b);

Vector add(std::span<const double> a, std::span<const double> b);
Vector sub(std::span<const double> a, std::span<const double> b);
Vector scale(std::span<const double> v, double factor);

bool all_finite(std::span<const double> v);

}  // namespace vlmprobe
