// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace speechmoe {

// Convention: one multiply-add = 2 FLOPs; each exp or log = 1 FLOP. Plain
// adds, max, relu, and divisions are not counted.
enum class FlopKind : std::size_t { kExpert = 0, kRouter, kEmbedding, kBackbone, kCount };

struct FlopCounter {
  std::array<std::uint64_t, static_cast<std::size_t>(FlopKind::kCount)> by_kind{};
  // Number of (frame, layer) expert FFN evaluations.
  std::uint64_t expert_evaluations = 0;

  void add(FlopKind kind, std::uint64_t flops) { by_kind[static_cast<std::size_t>(kind)] += flops; }
  void add_macs(FlopKind kind, std::uint64_t macs) { add(kind, 2 * macs); }
  std::uint64_t get(FlopKind kind) const { return by_kind[static_cast<std::size_t>(kind)]; }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto v : by_kind) t += v;
    return t;
  }
};

inline void count_macs(FlopCounter* c, FlopKind kind, std::uint64_t macs) {
  if (c) c->add_macs(kind, macs);
}
inline void count_transcendental(FlopCounter* c, FlopKind kind, std::uint64_t n) {
  if (c) c->add(kind, n);
}

}  // namespace speechmoe
