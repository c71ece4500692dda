#ifndef CMDQ_CALIBRATION_HPP
#define CMDQ_CALIBRATION_HPP

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmdq/error.hpp"
#include "cmdq/linalg.hpp"
#include "cmdq/matrix.hpp"
#include "cmdq/model.hpp"
#include "cmdq/tensor_io.hpp"

namespace cmdq {

/// Vision token count for a ViT-style encoder: one token per patch plus the class token.
constexpr std::size_t vision_sequence_length(std::size_t image_size, std::size_t patch_size) {
  if (patch_size == 0 || image_size % patch_size != 0)
    throw InvariantError("image size must be a positive multiple of the patch size");
  const std::size_t side = image_size / patch_size;
  return side * side + 1;
}

/// Activations captured at a module boundary. Each sample is S x D.
struct CalibrationSet {
  std::string module_id;
  std::vector<DenseMatrix> samples;
  std::map<std::string, DenseMatrix> aux;  // attention mask, position/token-type embeddings

  std::size_t feature_dim() const { return samples.empty() ? 0 : samples.front().cols(); }

  void validate() const {
    detail::require(!samples.empty(), "calibration set '" + module_id + "' has no samples");
    for (const auto& s : samples)
      detail::require(s.cols() == feature_dim(), "calibration samples disagree on feature dim");
  }

  /// All token rows of all samples stacked into one matrix.
  DenseMatrix stacked() const {
    validate();
    return vstack<float>(samples);
  }
};

/// Runs the model's inputs forward until they reach the selected module and returns
/// what arrives there. Nothing past the catch point is evaluated.
inline CalibrationSet capture_calibration(const SyntheticModel& model, const std::vector<DenseMatrix>& inputs,
                                          Modality selector,
                                          std::map<std::string, DenseMatrix> aux = {}) {
  if (inputs.empty()) throw InvariantError("no calibration inputs");
  const bool has_vision = !model.vision_layers.empty();
  if (selector == Modality::vision && !has_vision)
    throw InvariantError("model has no vision module to catch");
  if (selector == Modality::crossmodal && model.crossmodal_layers.empty())
    throw InvariantError("model has no cross-modal module to catch");

  const std::size_t in_dim = has_vision ? model.vision_dim : model.crossmodal_dim;
  CalibrationSet out{std::string(modality_name(selector)), {}, std::move(aux)};
  out.samples.reserve(inputs.size());
  for (const auto& x : inputs) {
    detail::require(x.cols() == in_dim, "calibration input has " + std::to_string(x.cols()) +
                                            " features, model expects " + std::to_string(in_dim));
    if (selector == Modality::vision) {
      out.samples.push_back(x);
      continue;
    }
    DenseMatrix h = x;
    for (const auto& name : model.vision_layers) h = matmul(h, model.weight(name));
    out.samples.push_back(std::move(h));
  }
  return out;
}

/// Running sum of 2 X^T X over activation rows.
class HessianAccumulator {
 public:
  explicit HessianAccumulator(std::size_t dim) : dim_(dim), sum_(dim, dim) {
    detail::require(dim > 0, "hessian dimension must be positive");
  }

  std::size_t dim() const noexcept { return dim_; }
  std::uint64_t sample_rows() const noexcept { return rows_; }

  void add(const DenseMatrix& sample) {
    detail::require(sample.cols() == dim_, "sample has " + std::to_string(sample.cols()) +
                                               " columns, hessian dim is " + std::to_string(dim_));
    for (std::size_t r = 0; r < sample.rows(); ++r) {
      const auto x = sample.row(r);
      for (std::size_t i = 0; i < dim_; ++i) {
        const double xi = 2.0 * x[i];
        if (xi == 0.0) continue;
        auto dst = sum_.row(i);
        for (std::size_t j = 0; j < dim_; ++j) dst[j] += xi * x[j];
      }
    }
    rows_ += sample.rows();
  }

  /// The accumulated sum narrowed to f32.
  DenseMatrix matrix() const {
    std::vector<float> v(sum_.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(sum_.values()[i]);
    return DenseMatrix(dim_, dim_, std::move(v));
  }

  const linalg::Matrixd& matrix_f64() const noexcept { return sum_; }

 private:
  std::size_t dim_;
  linalg::Matrixd sum_;
  std::uint64_t rows_ = 0;
};

inline HessianAccumulator accumulate_hessian(HessianAccumulator acc, const DenseMatrix& sample) {
  acc.add(sample);
  return acc;
}

inline HessianAccumulator hessian_from(const CalibrationSet& calib) {
  calib.validate();
  HessianAccumulator acc(calib.feature_dim());
  for (const auto& s : calib.samples) acc.add(s);
  return acc;
}

inline HessianAccumulator hessian_from(const DenseMatrix& rows) {
  HessianAccumulator acc(rows.cols());
  acc.add(rows);
  return acc;
}

/// lambda = damp_ratio * mean(diag(H)).
inline float hessian_damping(const DenseMatrix& h, float damp_ratio) {
  double diag = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) diag += h(i, i);
  return static_cast<float>(damp_ratio * diag / static_cast<double>(h.rows()));
}

/// Returns H + lambda I, verified positive definite.
inline DenseMatrix finalize_hessian(const HessianAccumulator& acc, float damp_ratio) {
  if (!(damp_ratio > 0.0F)) throw InvariantError("damp ratio must be positive");
  DenseMatrix h = acc.matrix();
  const float lambda = hessian_damping(h, damp_ratio);
  if (!(lambda > 0.0F))
    throw NumericError("hessian is all zero; damping cannot make it positive definite");
  for (std::size_t i = 0; i < h.rows(); ++i) h(i, i) += lambda;
  linalg::cholesky_lower(linalg::widen(h));
  return h;
}

/// FNV-1a over the matrix shape and f32 bit patterns.
inline std::uint64_t content_hash(const DenseMatrix& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&h](std::uint64_t v, int bytes) {
    for (int b = 0; b < bytes; ++b) {
      h ^= (v >> (8 * b)) & 0xFFU;
      h *= 0x100000001b3ULL;
    }
  };
  mix(m.rows(), 8);
  mix(m.cols(), 8);
  for (const float v : m.values()) mix(std::bit_cast<std::uint32_t>(v), 4);
  return h;
}

inline Container calibration_to_container(const CalibrationSet& calib) {
  calib.validate();
  Container c;
  for (std::size_t k = 0; k < calib.samples.size(); ++k)
    c.add("calib/samples/" + std::to_string(k), Tensor::f32(calib.samples[k]));
  for (const auto& [name, t] : calib.aux) c.add("calib/aux/" + name, Tensor::f32(t));
  c.attributes = {{"kind", "calibration"},
                  {"module_id", calib.module_id},
                  {"sample_count", calib.samples.size()}};
  return c;
}

inline CalibrationSet calibration_from_container(const Container& c) {
  static const std::string sample_prefix = "calib/samples/";
  static const std::string aux_prefix = "calib/aux/";
  CalibrationSet out;
  out.module_id = c.attributes.value("module_id", std::string{});
  std::map<std::size_t, DenseMatrix> ordered;
  for (const auto& [name, t] : c.tensors) {
    if (name.starts_with(sample_prefix)) {
      const std::string idx = name.substr(sample_prefix.size());
      std::size_t k = 0;
      const auto [p, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), k);
      if (ec != std::errc{} || p != idx.data() + idx.size())
        throw FormatError("bad calibration sample name '" + name + "'");
      ordered.emplace(k, t.to_dense());
    } else if (name.starts_with(aux_prefix)) {
      out.aux.emplace(name.substr(aux_prefix.size()), t.to_dense());
    }
  }
  std::size_t expect = 0;
  for (auto& [k, m] : ordered) {
    if (k != expect++) throw FormatError("calibration sample indices are not contiguous");
    out.samples.push_back(std::move(m));
  }
  if (out.samples.empty()) throw FormatError("container holds no calibration samples");
  try {
    out.validate();
  } catch (const InvariantError& e) {
    throw FormatError(e.what());
  }
  return out;
}

}  // namespace cmdq

#endif  // CMDQ_CALIBRATION_HPP
