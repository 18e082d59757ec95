#include "vlmprobe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vlmprobe/error.hpp"

namespace vlmprobe {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid_argument";
    case ErrorKind::Precondition: return "precondition";
    case ErrorKind::Format: return "format";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows * cols, ErrorKind::InvalidArgument,
          "matrix data length " + std::to_string(data_.size()) + " does not match " +
              std::to_string(rows) + "x" + std::to_string(cols));
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  std::vector<Vector> tmp;
  for (const auto& r : rows) tmp.emplace_back(r);
  return from_rows(tmp);
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows) {
  if (rows.empty()) return {};
  const std::size_t cols = rows.front().size();
  Matrix m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r].size() == cols, ErrorKind::InvalidArgument, "ragged matrix rows");
    m.set_row(r, rows[r]);
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
  require(values.size() == cols_, ErrorKind::InvalidArgument, "row width mismatch");
  std::copy(values.begin(), values.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

Matrix Matrix::top_rows(std::size_t count) const {
  require(count <= rows_, ErrorKind::InvalidArgument, "top_rows beyond matrix");
  return Matrix(count, cols_,
                std::vector<double>(data_.begin(),
                                    data_.begin() + static_cast<std::ptrdiff_t>(count * cols_)));
}

Vector softmax(std::span<const double> logits) {
  require(!logits.empty(), ErrorKind::InvalidArgument, "empty logits");
  const double max = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max);
    total += out[i];
  }
  for (double& x : out) x /= total;
  return out;
}

Vector rms_norm(std::span<const double> v, double eps, std::span<const double> gain) {
  require(!v.empty(), ErrorKind::InvalidArgument, "rms_norm of empty vector");
  require(eps >= 0.0, ErrorKind::InvalidArgument, "rms_norm eps must be nonnegative");
  require(gain.empty() || gain.size() == v.size(), ErrorKind::InvalidArgument,
          "rms_norm gain length " + std::to_string(gain.size()) + " != vector length " +
              std::to_string(v.size()));
  double ms = 0.0;
  for (double x : v) ms += x * x;
  ms /= static_cast<double>(v.size());
  const double denom = std::sqrt(ms + eps);
  require(denom > 0.0, ErrorKind::Precondition, "rms_norm of zero vector with eps = 0");
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = (gain.empty() ? 1.0 : gain[i]) * v[i] / denom;
  }
  return out;
}

double l2_norm(std::span<const double> v) {
  require(!v.empty(), ErrorKind::InvalidArgument, "l2_norm of empty vector");
  // Scaled accumulation keeps huge (skewed) rows from overflowing.
  double max_abs = 0.0;
  for (double x : v) max_abs = std::max(max_abs, std::abs(x));
  if (max_abs == 0.0) return 0.0;
  double acc = 0.0;
  for (double x : v) {
    const double s = x / max_abs;
    acc += s * s;
  }
  return max_abs * std::sqrt(acc);
}

double rms(std::span<const double> v) {
  return l2_norm(v) / std::sqrt(static_cast<double>(v.size()));
}

double dot(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::InvalidArgument, "dot length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

Vector vec_mat(std::span<const double> v, const Matrix& m) {
  require(v.size() == m.rows(), ErrorKind::InvalidArgument,
          "vec_mat: vector length " + std::to_string(v.size()) + " != matrix rows " +
              std::to_string(m.rows()));
  Vector out(m.cols(), 0.0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double vi = v[i];
    if (vi == 0.0) continue;
    const auto row = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += vi * row[j];
  }
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::InvalidArgument,
          "matmul shape mismatch: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
              " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) out.set_row(r, vec_mat(a.row(r), b));
  return out;
}

Vector add(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::InvalidArgument, "add length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Vector sub(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorKind::InvalidArgument, "sub length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Vector scale(std::span<const double> v, double factor) {
  Vector out(v.begin(), v.end());
  for (double& x : out) x *= factor;
  return out;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace vlmprobe
