// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string_view>

// Inner-loop kernels behind every tensor op. A scalar reference and an AVX2
// variant are compiled; one is picked at runtime from CPUID, overridable with
// MOE_KERNELS=scalar|avx2 or set_isa(). The AVX2 variants reassociate sums
// and use FMA, so results agree with the scalar reference to rounding only.

namespace speechmoe::kernels {

enum class Isa { kScalar, kAvx2 };

std::string_view isa_name(Isa isa);
bool isa_supported(Isa isa);
Isa active_isa();
// Throws ConfigError if `isa` is not supported on this CPU.
void set_isa(Isa isa);

// sum_i a[i] * b[i]
double dot(const double* a, const double* b, std::size_t n);
// y[i] += alpha * x[i]
void axpy(double alpha, const double* x, double* y, std::size_t n);
// y[i] += a[i] * x[i]
void hadamard_acc(const double* a, const double* x, double* y, std::size_t n);

namespace scalar {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void hadamard_acc(const double* a, const double* x, double* y, std::size_t n);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define SPEECHMOE_HAVE_AVX2_KERNELS 1
namespace avx2 {
double dot(const double* a, const double* b, std::size_t n);
void axpy(double alpha, const double* x, double* y, std::size_t n);
void hadamard_acc(const double* a, const double* x, double* y, std::size_t n);
}  // namespace avx2
#endif

}  // namespace speechmoe::kernels
