#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

#include "descevo/archive.hpp"
#include "descevo/error.hpp"
#include "descevo/rng.hpp"

namespace descevo {

/// Deterministic stand-in for a text encoder.
///
/// seed = FNV-1a-64 of the UTF-8 bytes; `dimension` splitmix64 draws are mapped
/// to [0,1) by dividing by 2^64 and then to [-1,1); the result is L2-normalized
/// in double precision and stored as float. A zero vector (practically
/// impossible) is redrawn with seed+1.
inline Embedding mock_embed(std::string_view text, std::size_t dimension) {
  if (dimension == 0) throw PreconditionError("mock_embed dimension must be positive");
  std::vector<double> v(dimension);
  for (std::uint64_t seed = fnv1a64(text);; ++seed) {
    SplitMix64 rng(seed);
    double sum = 0.0;
    for (auto& x : v) {
      const double u = static_cast<double>(rng.next()) / 18446744073709551616.0;
      x = 2.0 * u - 1.0;
      sum += x * x;
    }
    if (sum > 0.0) {
      const double norm = std::sqrt(sum);
      Embedding out(dimension);
      for (std::size_t i = 0; i < dimension; ++i) out[i] = static_cast<float>(v[i] / norm);
      return out;
    }
  }
}

}  // namespace descevo
