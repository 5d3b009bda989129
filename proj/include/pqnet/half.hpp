#pragma once

#include <cstdint>

namespace pqnet {

/// IEEE-754 binary16 encode with round-to-nearest-even. Magnitudes beyond
/// the largest finite half (65504) saturate; NaN encodes as a quiet NaN.
std::uint16_t float_to_half(float value);

float half_to_float(std::uint16_t bits);

/// Round a float through binary16 and back.
inline float round_to_half(float value) { return half_to_float(float_to_half(value)); }

}  // namespace pqnet
