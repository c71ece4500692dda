#ifndef CMDQ_LINALG_HPP
#define CMDQ_LINALG_HPP

#include <cmath>
#include <cstddef>

#include "cmdq/error.hpp"
#include "cmdq/matrix.hpp"

namespace cmdq::linalg {

using Matrixd = Matrix<double>;

inline Matrixd widen(const DenseMatrix& m) {
  Matrixd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.size(); ++i) out.values()[i] = m.values()[i];
  return out;
}

/// Lower-triangular L with L L^T = a. Throws NumericError if a is not SPD.
inline Matrixd cholesky_lower(const Matrixd& a) {
  detail::require(a.rows() == a.cols(), "cholesky needs a square matrix");
  const std::size_t n = a.rows();
  Matrixd l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw NumericError("cholesky failed at pivot " + std::to_string(j) +
                         ": matrix is not positive definite (increase damping)");
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / ljj;
    }
  }
  return l;
}

/// Inverse of an SPD matrix from its Cholesky factor.
inline Matrixd spd_inverse(const Matrixd& a) {
  const Matrixd l = cholesky_lower(a);
  const std::size_t n = l.rows();
  // linv = L^-1 by forward substitution, column by column
  Matrixd linv(n, n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = c; i < n; ++i) {
      double s = i == c ? 1.0 : 0.0;
      for (std::size_t k = c; k < i; ++k) s -= l(i, k) * linv(k, c);
      linv(i, c) = s / l(i, i);
    }
  }
  // a^-1 = L^-T L^-1
  Matrixd inv(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = 0.0;
      for (std::size_t k = i; k < n; ++k) s += linv(k, i) * linv(k, j);
      inv(i, j) = s;
      inv(j, i) = s;
    }
  }
  return inv;
}

/// Upper-triangular U with U^T U = a^-1.
inline Matrixd upper_cholesky_of_inverse(const Matrixd& a) {
  const Matrixd l = cholesky_lower(spd_inverse(a));
  Matrixd u(l.rows(), l.cols());
  for (std::size_t i = 0; i < l.rows(); ++i)
    for (std::size_t j = 0; j <= i; ++j) u(j, i) = l(i, j);
  return u;
}

}  // namespace cmdq::linalg

#endif  // CMDQ_LINALG_HPP
