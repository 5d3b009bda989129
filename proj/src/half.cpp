#include "pqnet/half.hpp"

#include <bit>
#include <cmath>

namespace pqnet {

std::uint16_t float_to_half(float value) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const std::uint16_t sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t abs = bits & 0x7fffffffu;

    if (abs > 0x7f800000u) return sign | 0x7e00u;  // NaN
    if (abs >= 0x477ff000u) return sign | 0x7bffu; // rounds past 65504 (or inf): saturate

    const int exp = static_cast<int>(abs >> 23) - 127;
    std::uint32_t mant = abs & 0x7fffffu;

    if (exp >= -14) {
        // Normal half. Round the 23-bit mantissa to 10 bits.
        std::uint32_t half = (static_cast<std::uint32_t>(exp + 15) << 10) | (mant >> 13);
        const std::uint32_t rem = mant & 0x1fffu;
        if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) ++half;  // carry may bump exponent
        return sign | static_cast<std::uint16_t>(half);
    }
    if (exp < -25) return sign;  // below half of the smallest subnormal

    // Subnormal half: value = mant_with_implicit * 2^(exp-23), target unit 2^-24.
    mant |= 0x800000u;
    const int shift = -exp - 1;  // 14..24
    std::uint32_t half = mant >> shift;
    const std::uint32_t rem = mant & ((1u << shift) - 1u);
    const std::uint32_t midpoint = 1u << (shift - 1);
    if (rem > midpoint || (rem == midpoint && (half & 1u))) ++half;
    return sign | static_cast<std::uint16_t>(half);
}

float half_to_float(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    const std::uint32_t mant = h & 0x3ffu;
    if (exp == 0) {
        const float v = std::ldexp(static_cast<float>(mant), -24);
        return sign ? -v : v;
    }
    if (exp == 31) {
        return std::bit_cast<float>(sign | 0x7f800000u | (mant << 13));
    }
    return std::bit_cast<float>(sign | ((exp + 112) << 23) | (mant << 13));
}

}  // namespace pqnet
