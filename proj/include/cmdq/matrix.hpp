#ifndef CMDQ_MATRIX_HPP
#define CMDQ_MATRIX_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cmdq/error.hpp"

namespace cmdq {

/// Row-major 2-D grid. Floating-point grids reject NaN/Inf at construction.
template <typename T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    detail::require(data_.size() == rows_ * cols_,
                    "matrix data length " + std::to_string(data_.size()) +
                        " does not match " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
    if constexpr (std::is_floating_point_v<T>) {
      for (const T v : data_) {
        if (!std::isfinite(v)) throw NumericError("matrix contains a non-finite value");
      }
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept {
    return data_[r * cols_ + c];
  }

  std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& vector() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using DenseMatrix = Matrix<float>;
using IntGrid = Matrix<std::uint32_t>;

/// Standard-normal matrix, a pure function of (rows, cols, seed).
inline DenseMatrix seeded_random_matrix(std::size_t rows, std::size_t cols,
                                        std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw InvariantError("random matrix needs nonzero dimensions");
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> dist(0.0F, 1.0F);
  std::vector<float> data(rows * cols);
  for (float& v : data) v = dist(gen);
  return DenseMatrix(rows, cols, std::move(data));
}

/// Stacks matrices with equal column counts on top of each other.
template <typename T>
Matrix<T> vstack(std::span<const Matrix<T>> parts) {
  detail::require(!parts.empty(), "vstack of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    detail::require(p.cols() == cols, "vstack column mismatch");
    rows += p.rows();
  }
  std::vector<T> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.values().begin(), p.values().end());
  return Matrix<T>(rows, cols, std::move(data));
}

/// Plain (rows x inner) * (inner x cols) product with f32 accumulation.
inline DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  detail::require(a.cols() == b.rows(), "matmul inner dimension mismatch");
  DenseMatrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const float aik = a(i, k);
      const auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

inline double frobenius_norm(const DenseMatrix& m) {
  double s = 0.0;
  for (const float v : m.values()) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

/// ||a - b||_F / max(||b||_F, tiny).
inline double relative_frobenius_error(const DenseMatrix& a, const DenseMatrix& b) {
  detail::require(a.rows() == b.rows() && a.cols() == b.cols(), "shape mismatch");
  double num = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - b.values()[i];
    num += d * d;
  }
  const double den = frobenius_norm(b);
  return std::sqrt(num) / (den > 1e-30 ? den : 1e-30);
}

}  // namespace cmdq

#endif  // CMDQ_MATRIX_HPP
