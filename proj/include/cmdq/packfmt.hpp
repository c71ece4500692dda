#ifndef CMDQ_PACKFMT_HPP
#define CMDQ_PACKFMT_HPP

// N-bit codes packed into little-endian lanes of 32-bit words. Weights pack
// consecutive input rows into one word per output column; zero points pack
// consecutive output columns into one word per group. Lane 0 holds the lowest
// index.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmdq/error.hpp"
#include "cmdq/half.hpp"
#include "cmdq/matrix.hpp"
#include "cmdq/quantcore.hpp"
#include "cmdq/tensor_io.hpp"

namespace cmdq {

constexpr std::size_t lanes_per_word(int bits) {
  if (!supported_bits(bits)) throw InvariantError("unsupported bit width " + std::to_string(bits));
  return 32U / static_cast<std::size_t>(bits);
}

constexpr std::uint32_t lane_mask(int bits) noexcept { return (1U << bits) - 1U; }

/// (word >> (lane * N)) & (2^N - 1)
constexpr std::uint32_t unpack_value(std::uint32_t word, std::size_t lane, int bits) {
  const std::size_t f = lanes_per_word(bits);
  if (lane >= f) throw InvariantError("lane " + std::to_string(lane) + " out of range for " +
                                      std::to_string(bits) + "-bit packing");
  const auto sh = static_cast<std::uint32_t>((lane % f) * static_cast<std::size_t>(bits));
  return (word >> sh) & lane_mask(bits);
}

namespace detail {

inline void check_codes(const IntGrid& g, int bits, const char* what) {
  const std::uint32_t maxq = lane_mask(bits);
  for (const auto v : g.values())
    if (v > maxq)
      throw InvariantError(std::string(what) + " value " + std::to_string(v) + " does not fit in " +
                           std::to_string(bits) + " bits");
}

}  // namespace detail

/// I x O codes -> (I / f) x O words.
inline IntGrid pack_weights(const IntGrid& qint, int bits) {
  const std::size_t f = lanes_per_word(bits);
  if (qint.rows() % f != 0)
    throw InvariantError("input rows " + std::to_string(qint.rows()) + " not divisible by " +
                         std::to_string(f) + " lanes per word");
  detail::check_codes(qint, bits, "weight");
  IntGrid out(qint.rows() / f, qint.cols());
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row(r);
    for (std::size_t lane = 0; lane < f; ++lane) {
      const auto src = qint.row(r * f + lane);
      const auto sh = static_cast<std::uint32_t>(lane * static_cast<std::size_t>(bits));
      for (std::size_t o = 0; o < out.cols(); ++o) dst[o] |= src[o] << sh;
    }
  }
  return out;
}

inline IntGrid unpack_weights(const IntGrid& qweight, int bits) {
  const std::size_t f = lanes_per_word(bits);
  IntGrid out(qweight.rows() * f, qweight.cols());
  for (std::size_t r = 0; r < qweight.rows(); ++r)
    for (std::size_t lane = 0; lane < f; ++lane)
      for (std::size_t o = 0; o < qweight.cols(); ++o)
        out(r * f + lane, o) = unpack_value(qweight(r, o), lane, bits);
  return out;
}

inline std::size_t packed_zero_words(std::size_t out_features, int bits) {
  return (out_features * static_cast<std::size_t>(bits) + 31U) / 32U;
}

/// G x O codes -> G x ceil(O N / 32) words; unused trailing lanes stay zero.
inline IntGrid pack_zeros(const IntGrid& zeros, int bits) {
  const std::size_t f = lanes_per_word(bits);
  detail::check_codes(zeros, bits, "zero point");
  IntGrid out(zeros.rows(), packed_zero_words(zeros.cols(), bits));
  for (std::size_t g = 0; g < zeros.rows(); ++g)
    for (std::size_t j = 0; j < zeros.cols(); ++j)
      out(g, j / f) |= zeros(g, j) << static_cast<std::uint32_t>((j % f) * static_cast<std::size_t>(bits));
  return out;
}

inline IntGrid unpack_zeros(const IntGrid& qzeros, int bits, std::size_t out_features) {
  const std::size_t f = lanes_per_word(bits);
  detail::require(qzeros.cols() == packed_zero_words(out_features, bits), "qzeros width mismatch");
  IntGrid out(qzeros.rows(), out_features);
  for (std::size_t g = 0; g < qzeros.rows(); ++g)
    for (std::size_t j = 0; j < out_features; ++j) out(g, j) = unpack_value(qzeros(g, j / f), j % f, bits);
  return out;
}

/// A quantized linear layer in its storage form.
struct PackedLinear {
  IntGrid qweight;                    // (I / f) x O
  Matrix<std::uint16_t> scales;       // G x O, binary16 bits
  IntGrid qzeros;                     // G x ceil(O N / 32)
  std::vector<std::int32_t> g_idx;    // I
  std::optional<std::vector<float>> bias;  // O
  int bits = 4;
  int groupsize = 128;
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  std::size_t lanes() const { return lanes_per_word(bits); }
  std::size_t group_count() const noexcept { return scales.rows(); }

  float scale(std::size_t g, std::size_t o) const noexcept { return f16_to_f32(scales(g, o)); }

  std::uint32_t zero(std::size_t g, std::size_t o) const {
    const std::size_t f = lanes();
    return unpack_value(qzeros(g, o / f), o % f, bits);
  }

  std::uint32_t code(std::size_t i, std::size_t o) const {
    const std::size_t f = lanes();
    return unpack_value(qweight(i / f, o), i % f, bits);
  }

  void validate() const {
    const std::size_t f = lanes();
    detail::require(in_features % f == 0, "in_features not divisible by lanes per word");
    detail::require(qweight.rows() * f == in_features && qweight.cols() == out_features,
                    "qweight shape mismatch");
    detail::require(scales.cols() == out_features && scales.rows() >= 1, "scales shape mismatch");
    detail::require(qzeros.rows() == scales.rows() && qzeros.cols() == packed_zero_words(out_features, bits),
                    "qzeros shape mismatch");
    detail::require(g_idx.size() == in_features, "g_idx length mismatch");
    for (std::size_t i = 0; i < g_idx.size(); ++i) {
      detail::require(g_idx[i] >= 0 && static_cast<std::size_t>(g_idx[i]) < group_count(),
                      "g_idx entry out of range");
      detail::require(i == 0 || g_idx[i] >= g_idx[i - 1], "g_idx must be nondecreasing");
    }
    for (const auto s : scales.values()) {
      const float v = f16_to_f32(s);
      detail::require(v > 0.0F && std::isfinite(v), "scale must be positive and finite");
    }
    if (bias) detail::require(bias->size() == out_features, "bias length must equal out_features");
  }

  friend bool operator==(const PackedLinear&, const PackedLinear&) = default;
};

inline int infer_groupsize(const std::vector<std::int32_t>& g_idx) {
  if (g_idx.empty()) return -1;
  if (g_idx.back() == 0) return -1;
  int n = 0;
  while (static_cast<std::size_t>(n) < g_idx.size() && g_idx[static_cast<std::size_t>(n)] == 0) ++n;
  return n;
}

/// Scales narrow to binary16 here; values below the smallest subnormal are raised to it.
inline PackedLinear pack_linear(const QuantizedMatrix& q, std::optional<std::vector<float>> bias = std::nullopt,
                                std::optional<int> groupsize = std::nullopt) {
  q.validate();
  if (bias && bias->size() != q.out_features())
    throw InvariantError("bias has " + std::to_string(bias->size()) + " entries, layer has " +
                         std::to_string(q.out_features()) + " outputs");
  PackedLinear p;
  p.bits = q.bits;
  p.in_features = q.in_features();
  p.out_features = q.out_features();
  p.groupsize = groupsize.value_or(infer_groupsize(q.params.g_idx));
  p.qweight = pack_weights(q.qint, q.bits);
  p.qzeros = pack_zeros(q.params.zeros, q.bits);
  p.g_idx = q.params.g_idx;
  p.bias = std::move(bias);
  p.scales = Matrix<std::uint16_t>(q.params.scales.rows(), q.params.scales.cols());
  for (std::size_t k = 0; k < q.params.scales.size(); ++k) {
    const float s = q.params.scales.values()[k];
    if (s > kF16Max) throw NumericError("scale " + std::to_string(s) + " overflows binary16");
    p.scales.values()[k] = f32_to_f16(std::max(s, kF16MinSubnormal));
  }
  return p;
}

/// Back to the logical form (codes + f32 scales widened from binary16).
inline QuantizedMatrix unpack_linear(const PackedLinear& p) {
  p.validate();
  QuantizedMatrix q;
  q.bits = p.bits;
  q.qint = unpack_weights(p.qweight, p.bits);
  q.params.zeros = unpack_zeros(p.qzeros, p.bits, p.out_features);
  q.params.scales = DenseMatrix(p.scales.rows(), p.scales.cols());
  for (std::size_t k = 0; k < p.scales.size(); ++k) q.params.scales.values()[k] = f16_to_f32(p.scales.values()[k]);
  q.params.g_idx = p.g_idx;
  return q;
}

/// I x O dense weights, (code - zero) * scale. Bias is not applied.
inline DenseMatrix dequantize(const PackedLinear& p) { return dequantize_matrix(unpack_linear(p)); }

struct SizeEstimate {
  std::uint64_t qweight = 0;
  std::uint64_t scales = 0;
  std::uint64_t qzeros = 0;
  std::uint64_t g_idx = 0;
  std::uint64_t total = 0;
  double ratio_vs_f16 = 0.0;
};

/// Storage bytes of one packed layer, without bias.
inline SizeEstimate estimate_packed_size(std::uint64_t in_features, std::uint64_t out_features, int bits,
                                         int groupsize) {
  const std::uint64_t f = lanes_per_word(bits);
  if (in_features % f != 0)
    throw InvariantError("in_features " + std::to_string(in_features) + " not divisible by " + std::to_string(f));
  if (groupsize == 0 || groupsize < -1) throw InvariantError("groupsize must be positive or -1");
  const std::uint64_t gs = groupsize == -1 ? std::max<std::uint64_t>(in_features, 1) : static_cast<std::uint64_t>(groupsize);
  const std::uint64_t groups = (in_features + gs - 1) / gs;
  SizeEstimate s;
  s.qweight = in_features / f * out_features * 4;
  s.scales = groups * out_features * 2;
  s.qzeros = groups * ((out_features * static_cast<std::uint64_t>(bits) + 31) / 32) * 4;
  s.g_idx = in_features * 4;
  s.total = s.qweight + s.scales + s.qzeros + s.g_idx;
  s.ratio_vs_f16 = static_cast<double>(s.total) / (static_cast<double>(in_features) * static_cast<double>(out_features) * 2.0);
  return s;
}

inline void add_packed_linear(Container& c, const std::string& name, const PackedLinear& p) {
  p.validate();
  c.add(name + "/qweight", Tensor::u32(p.qweight));
  c.add(name + "/scales", Tensor::f16_bits(p.scales));
  c.add(name + "/qzeros", Tensor::u32(p.qzeros));
  c.add(name + "/g_idx", Tensor::i32_vector(p.g_idx));
  if (p.bias) c.add(name + "/bias", Tensor::f32_vector(*p.bias));
  c.attributes["layers"][name] = {{"bits", p.bits},
                                  {"groupsize", p.groupsize},
                                  {"in_features", p.in_features},
                                  {"out_features", p.out_features}};
}

inline PackedLinear read_packed_linear(const Container& c, const std::string& name) {
  if (!c.attributes.contains("layers") || !c.attributes["layers"].contains(name))
    throw FormatError("container has no packed layer '" + name + "'");
  const auto& a = c.attributes["layers"][name];
  PackedLinear p;
  try {
    p.bits = a.at("bits").get<int>();
    p.groupsize = a.at("groupsize").get<int>();
    p.in_features = a.at("in_features").get<std::size_t>();
    p.out_features = a.at("out_features").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("layer '" + name + "' attributes: " + e.what());
  }
  if (!supported_bits(p.bits)) throw FormatError("layer '" + name + "' has unsupported bit width");
  p.qweight = c.at(name + "/qweight").to_u32();
  p.scales = c.at(name + "/scales").to_f16_bits();
  p.qzeros = c.at(name + "/qzeros").to_u32();
  p.g_idx = c.at(name + "/g_idx").to_i32();
  if (c.contains(name + "/bias")) p.bias = c.at(name + "/bias").to_f32_vector();
  try {
    p.validate();
  } catch (const InvariantError& e) {
    throw FormatError("layer '" + name + "': " + e.what());
  }
  return p;
}

}  // namespace cmdq

#endif  // CMDQ_PACKFMT_HPP
