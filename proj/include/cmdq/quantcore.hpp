#ifndef CMDQ_QUANTCORE_HPP
#define CMDQ_QUANTCORE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmdq/error.hpp"
#include "cmdq/linalg.hpp"
#include "cmdq/matrix.hpp"

namespace cmdq {

inline constexpr float kScaleFloor = 1e-8F;

constexpr bool supported_bits(int bits) noexcept { return bits == 2 || bits == 4 || bits == 8; }

struct QuantConfig {
  int bits = 4;
  int groupsize = 128;  // rows per group, or -1 for one group spanning all rows
  bool symmetric = false;
  float damp_ratio = 0.01F;

  void validate() const {
    if (!supported_bits(bits))
      throw InvariantError("unsupported bit width " + std::to_string(bits) + " (expected 2, 4 or 8)");
    if (groupsize == 0 || groupsize < -1)
      throw InvariantError("groupsize must be positive or -1, got " + std::to_string(groupsize));
    if (!(damp_ratio > 0.0F)) throw InvariantError("damp ratio must be positive");
  }

  std::uint32_t max_code() const noexcept { return (1U << bits) - 1U; }

  std::size_t rows_per_group(std::size_t in_features) const noexcept {
    return groupsize == -1 ? std::max<std::size_t>(in_features, 1) : static_cast<std::size_t>(groupsize);
  }

  std::size_t group_count(std::size_t in_features) const noexcept {
    const std::size_t gs = rows_per_group(in_features);
    return (in_features + gs - 1) / gs;
  }
};

/// Per-(group, output column) scale and integer zero point, plus the row -> group map.
struct GroupQuantParams {
  DenseMatrix scales;  // G x O
  IntGrid zeros;       // G x O, codes in [0, 2^N - 1]
  std::vector<std::int32_t> g_idx;  // length I

  std::size_t group_count() const noexcept { return scales.rows(); }
  std::size_t out_features() const noexcept { return scales.cols(); }

  void validate(int bits) const {
    const std::uint32_t maxq = (1U << bits) - 1U;
    detail::require(zeros.rows() == scales.rows() && zeros.cols() == scales.cols(),
                    "scales and zeros shapes differ");
    for (const float s : scales.values()) detail::require(s > 0.0F, "scale must be strictly positive");
    for (const auto z : zeros.values()) detail::require(z <= maxq, "zero point out of range");
    for (std::size_t i = 0; i < g_idx.size(); ++i) {
      detail::require(g_idx[i] >= 0 && static_cast<std::size_t>(g_idx[i]) < group_count(),
                      "g_idx entry out of range");
      detail::require(i == 0 || g_idx[i] >= g_idx[i - 1], "g_idx must be nondecreasing");
    }
  }

  friend bool operator==(const GroupQuantParams&, const GroupQuantParams&) = default;
};

struct QuantizedMatrix {
  IntGrid qint;  // I x O
  GroupQuantParams params;
  int bits = 4;

  std::size_t in_features() const noexcept { return qint.rows(); }
  std::size_t out_features() const noexcept { return qint.cols(); }

  void validate() const {
    detail::require(supported_bits(bits), "unsupported bit width");
    params.validate(bits);
    detail::require(params.g_idx.size() == qint.rows(), "g_idx length must equal row count");
    detail::require(params.out_features() == qint.cols(), "params column count mismatch");
    const std::uint32_t maxq = (1U << bits) - 1U;
    for (const auto q : qint.values()) detail::require(q <= maxq, "quantized code out of range");
  }

  friend bool operator==(const QuantizedMatrix&, const QuantizedMatrix&) = default;
};

namespace detail {

inline std::vector<std::int32_t> make_g_idx(std::size_t rows, const QuantConfig& cfg) {
  std::vector<std::int32_t> g(rows);
  const std::size_t gs = cfg.rows_per_group(rows);
  for (std::size_t i = 0; i < rows; ++i) g[i] = static_cast<std::int32_t>(i / gs);
  return g;
}

/// Fits row `group` of (scales, zeros) from rows [r0, r1) of w. The asymmetric range
/// always contains zero, so a constant column still maps its value onto the grid.
inline void fit_group(const DenseMatrix& w, std::size_t r0, std::size_t r1, std::size_t group,
                      const QuantConfig& cfg, DenseMatrix& scales, IntGrid& zeros) {
  const std::uint32_t maxq = cfg.max_code();
  for (std::size_t o = 0; o < w.cols(); ++o) {
    float lo = 0.0F;
    float hi = 0.0F;
    for (std::size_t r = r0; r < r1; ++r) {
      lo = std::min(lo, w(r, o));
      hi = std::max(hi, w(r, o));
    }
    float scale = 0.0F;
    std::uint32_t zero = 0;
    if (cfg.symmetric) {
      const float amax = std::max(-lo, hi);
      scale = amax / static_cast<float>((1U << (cfg.bits - 1)) - 1U);
      zero = 1U << (cfg.bits - 1);
    } else {
      scale = (hi - lo) / static_cast<float>(maxq);
    }
    scale = std::max(scale, kScaleFloor);
    if (!cfg.symmetric) {
      const float z = std::nearbyint(-lo / scale);
      zero = static_cast<std::uint32_t>(std::clamp(z, 0.0F, static_cast<float>(maxq)));
    }
    scales(group, o) = scale;
    zeros(group, o) = zero;
  }
}

}  // namespace detail

/// Snaps one value to its code: clamp(round(w / scale) + zero, 0, maxq).
inline std::uint32_t quantize_value(float w, float scale, std::uint32_t zero, std::uint32_t maxq) noexcept {
  const float q = std::nearbyint(w / scale) + static_cast<float>(zero);
  return static_cast<std::uint32_t>(std::clamp(q, 0.0F, static_cast<float>(maxq)));
}

inline float dequantize_value(std::uint32_t q, float scale, std::uint32_t zero) noexcept {
  return (static_cast<float>(q) - static_cast<float>(zero)) * scale;
}

inline GroupQuantParams compute_group_params(const DenseMatrix& w, const QuantConfig& cfg) {
  cfg.validate();
  const std::size_t rows = w.rows();
  const std::size_t groups = cfg.group_count(rows);
  const std::size_t gs = cfg.rows_per_group(rows);
  GroupQuantParams p{DenseMatrix(groups, w.cols()), IntGrid(groups, w.cols()), detail::make_g_idx(rows, cfg)};
  for (std::size_t g = 0; g < groups; ++g)
    detail::fit_group(w, g * gs, std::min(rows, (g + 1) * gs), g, cfg, p.scales, p.zeros);
  return p;
}

/// Quantizes w against fixed parameters.
inline QuantizedMatrix quantize_with_params(const DenseMatrix& w, GroupQuantParams params, int bits) {
  detail::require(params.g_idx.size() == w.rows() && params.out_features() == w.cols(),
                  "parameters do not match the matrix shape");
  const std::uint32_t maxq = (1U << bits) - 1U;
  IntGrid q(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const auto g = static_cast<std::size_t>(params.g_idx[i]);
    for (std::size_t o = 0; o < w.cols(); ++o)
      q(i, o) = quantize_value(w(i, o), params.scales(g, o), params.zeros(g, o), maxq);
  }
  return {std::move(q), std::move(params), bits};
}

inline QuantizedMatrix rtn_quantize(const DenseMatrix& w, const QuantConfig& cfg) {
  return quantize_with_params(w, compute_group_params(w, cfg), cfg.bits);
}

inline DenseMatrix dequantize_matrix(const QuantizedMatrix& q) {
  DenseMatrix out(q.in_features(), q.out_features());
  for (std::size_t i = 0; i < q.in_features(); ++i) {
    const auto g = static_cast<std::size_t>(q.params.g_idx[i]);
    for (std::size_t o = 0; o < q.out_features(); ++o)
      out(i, o) = dequantize_value(q.qint(i, o), q.params.scales(g, o), q.params.zeros(g, o));
  }
  return out;
}

/// trace(D^T H D) / O with D = w - approx, evaluated in f64.
inline double proxy_loss(const DenseMatrix& w, const DenseMatrix& approx, const DenseMatrix& h) {
  detail::require(w.rows() == approx.rows() && w.cols() == approx.cols(), "shape mismatch");
  detail::require(h.rows() == w.rows() && h.cols() == w.rows(), "hessian dim mismatch");
  const std::size_t n = w.rows();
  const std::size_t m = w.cols();
  std::vector<double> d(n * m);
  for (std::size_t k = 0; k < d.size(); ++k)
    d[k] = static_cast<double>(w.values()[k]) - approx.values()[k];
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double hij = h(i, j);
      if (hij == 0.0) continue;
      double dot = 0.0;
      for (std::size_t o = 0; o < m; ++o) dot += d[i * m + o] * d[j * m + o];
      total += hij * dot;
    }
  return total / static_cast<double>(std::max<std::size_t>(m, 1));
}

/// Hessian-weighted sequential quantization over input rows. Each row is snapped to
/// its group grid and the rounding error, scaled by the inverse-Hessian Cholesky
/// factor, is pushed into the rows not yet quantized. Group parameters are fitted on
/// the error-updated rows when a group starts.
inline QuantizedMatrix gptq_quantize(const DenseMatrix& w, const DenseMatrix& h, const QuantConfig& cfg) {
  cfg.validate();
  const std::size_t rows = w.rows();
  const std::size_t cols = w.cols();
  detail::require(h.rows() == rows && h.cols() == rows,
                  "hessian is " + std::to_string(h.rows()) + "x" + std::to_string(h.cols()) +
                      ", weight has " + std::to_string(rows) + " input rows");
  const linalg::Matrixd u = linalg::upper_cholesky_of_inverse(linalg::widen(h));

  const std::uint32_t maxq = cfg.max_code();
  const std::size_t gs = cfg.rows_per_group(rows);
  const std::size_t groups = cfg.group_count(rows);
  GroupQuantParams p{DenseMatrix(groups, cols), IntGrid(groups, cols), detail::make_g_idx(rows, cfg)};
  IntGrid q(rows, cols);
  DenseMatrix work = w;
  std::vector<float> err(cols);

  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t g = i / gs;
    if (i % gs == 0) detail::fit_group(work, i, std::min(rows, i + gs), g, cfg, p.scales, p.zeros);
    const auto d = static_cast<float>(u(i, i));
    for (std::size_t o = 0; o < cols; ++o) {
      const float s = p.scales(g, o);
      const std::uint32_t z = p.zeros(g, o);
      const std::uint32_t code = quantize_value(work(i, o), s, z, maxq);
      q(i, o) = code;
      err[o] = (work(i, o) - dequantize_value(code, s, z)) / d;
    }
    for (std::size_t j = i + 1; j < rows; ++j) {
      const auto uij = static_cast<float>(u(i, j));
      if (uij == 0.0F) continue;
      auto dst = work.row(j);
      for (std::size_t o = 0; o < cols; ++o) dst[o] -= uij * err[o];
    }
  }
  return {std::move(q), std::move(p), cfg.bits};
}

}  // namespace cmdq

#endif  // CMDQ_QUANTCORE_HPP
