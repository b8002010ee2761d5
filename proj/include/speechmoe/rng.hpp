// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "speechmoe/tensor.hpp"

namespace speechmoe {

// mt19937_64 is fully specified by the standard; the distributions below are
// written out by hand so corpora and initial weights are identical across
// standard-library implementations.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller; consumes two draws per sample.
inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

// Glorot-uniform: U(-r, r), r = sqrt(6 / (fan_in + fan_out)).
inline void glorot_init(Tensor& t, Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double r = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = uniform(rng, -r, r);
}

}  // namespace speechmoe
