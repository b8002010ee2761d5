// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#include "speechmoe/errors.hpp"

namespace speechmoe::kernels {

namespace scalar {

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void hadamard_acc(const double* a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a[i] * x[i];
}

}  // namespace scalar

namespace {

struct Table {
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*hadamard_acc)(const double*, const double*, double*, std::size_t);
};

constexpr Table kScalarTable{&scalar::dot, &scalar::axpy, &scalar::hadamard_acc};
#ifdef SPEECHMOE_HAVE_AVX2_KERNELS
constexpr Table kAvx2Table{&avx2::dot, &avx2::axpy, &avx2::hadamard_acc};
#endif

bool cpu_has_avx2() {
#if defined(SPEECHMOE_HAVE_AVX2_KERNELS) && (defined(__GNUC__) || defined(__clang__))
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Table* table_for(Isa isa) {
#ifdef SPEECHMOE_HAVE_AVX2_KERNELS
  if (isa == Isa::kAvx2) return &kAvx2Table;
#endif
  return &kScalarTable;
}

Isa initial_isa() {
  if (const char* env = std::getenv("MOE_KERNELS")) {
    const std::string v(env);
    if (v == "scalar") return Isa::kScalar;
    if (v == "avx2" && cpu_has_avx2()) return Isa::kAvx2;
  }
  return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& current() {
  static std::atomic<Isa> isa{initial_isa()};
  return isa;
}

const Table& table() { return *table_for(current().load(std::memory_order_relaxed)); }

}  // namespace

std::string_view isa_name(Isa isa) { return isa == Isa::kAvx2 ? "avx2" : "scalar"; }

bool isa_supported(Isa isa) { return isa == Isa::kScalar || cpu_has_avx2(); }

Isa active_isa() { return current().load(); }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) {
    throw ConfigError("kernel ISA " + std::string(isa_name(isa)) + " not supported on this CPU");
  }
  current().store(isa);
}

double dot(const double* a, const double* b, std::size_t n) { return table().dot(a, b, n); }

void axpy(double alpha, const double* x, double* y, std::size_t n) { table().axpy(alpha, x, y, n); }

void hadamard_acc(const double* a, const double* x, double* y, std::size_t n) {
  table().hadamard_acc(a, x, y, n);
}

}  // namespace speechmoe::kernels
