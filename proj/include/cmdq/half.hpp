#ifndef CMDQ_HALF_HPP
#define CMDQ_HALF_HPP

#include <bit>
#include <cmath>
#include <cstdint>

namespace cmdq {

/// IEEE 754 binary32 -> binary16 bits, round to nearest even.
constexpr std::uint16_t f32_to_f16(float value) noexcept {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000U);
  const std::uint32_t exp = (bits >> 23) & 0xFFU;
  std::uint32_t mant = bits & 0x7FFFFFU;

  if (exp == 0xFFU) return sign | 0x7C00U | (mant != 0 ? 0x200U : 0U);

  const int e = static_cast<int>(exp) - 127 + 15;
  if (e >= 31) return sign | 0x7C00U;
  if (e <= 0) {
    if (e < -10) return sign;
    mant |= 0x800000U;
    const auto shift = static_cast<std::uint32_t>(14 - e);
    std::uint32_t half_mant = mant >> shift;
    const std::uint32_t rem = mant & ((1U << shift) - 1U);
    const std::uint32_t halfway = 1U << (shift - 1U);
    if (rem > halfway || (rem == halfway && (half_mant & 1U) != 0)) ++half_mant;
    return static_cast<std::uint16_t>(sign | half_mant);
  }
  std::uint32_t half = sign | (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
  const std::uint32_t rem = mant & 0x1FFFU;
  // a carry out of the mantissa correctly bumps the exponent
  if (rem > 0x1000U || (rem == 0x1000U && (half & 1U) != 0)) ++half;
  return static_cast<std::uint16_t>(half);
}

constexpr float f16_to_f32(std::uint16_t half) noexcept {
  const std::uint32_t sign = static_cast<std::uint32_t>(half & 0x8000U) << 16;
  const std::uint32_t exp = (half >> 10) & 0x1FU;
  const std::uint32_t mant = half & 0x3FFU;
  if (exp == 0) {
    if (mant == 0) return std::bit_cast<float>(sign);
    // subnormal: mant * 2^-24
    const float mag = static_cast<float>(mant) * 5.9604644775390625e-8F;
    return sign != 0 ? -mag : mag;
  }
  if (exp == 31) return std::bit_cast<float>(sign | 0x7F800000U | (mant << 13));
  return std::bit_cast<float>(sign | ((exp - 15 + 127) << 23) | (mant << 13));
}

inline float round_to_f16(float value) noexcept { return f16_to_f32(f32_to_f16(value)); }

inline constexpr float kF16MinSubnormal = 5.9604644775390625e-8F;
inline constexpr float kF16Max = 65504.0F;

}  // namespace cmdq

#endif  // CMDQ_HALF_HPP
