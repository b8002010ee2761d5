// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <vector>

#include "doctest.h"
#include "fd.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/kernels.hpp"
#include "speechmoe/tensor.hpp"

using namespace speechmoe;
namespace k = speechmoe::kernels;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = normal(rng);
  return v;
}

struct IsaGuard {
  k::Isa saved = k::active_isa();
  ~IsaGuard() { k::set_isa(saved); }
};

}  // namespace

TEST_CASE("scalar reference kernels on hand examples") {
  const double a[] = {1, 2, 3};
  const double b[] = {4, 5, 6};
  CHECK(k::scalar::dot(a, b, 3) == 32.0);
  double y[] = {1, 1, 1};
  k::scalar::axpy(2.0, a, y, 3);
  CHECK(y[2] == 7.0);
  k::scalar::hadamard_acc(a, b, y, 3);
  CHECK(y[0] == 7.0);
  CHECK(k::scalar::dot(a, b, 0) == 0.0);
}

#ifdef SPEECHMOE_HAVE_AVX2_KERNELS
TEST_CASE("avx2 kernels agree with the scalar reference") {
  if (!k::isa_supported(k::Isa::kAvx2)) {
    MESSAGE("AVX2 not available on this CPU; skipping");
    return;
  }
  Rng rng(11);
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 15u, 16u, 17u, 31u, 64u, 100u, 1023u}) {
    const auto a = random_vec(rng, n);
    const auto b = random_vec(rng, n);
    double mag = 0.0;
    for (std::size_t i = 0; i < n; ++i) mag += std::abs(a[i] * b[i]);
    CHECK(std::abs(k::avx2::dot(a.data(), b.data(), n) - k::scalar::dot(a.data(), b.data(), n)) <=
          1e-14 * (mag + 1.0));
    auto y1 = random_vec(rng, n);
    auto y2 = y1;
    k::avx2::axpy(0.37, a.data(), y1.data(), n);
    k::scalar::axpy(0.37, a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-15));
    k::avx2::hadamard_acc(a.data(), b.data(), y1.data(), n);
    k::scalar::hadamard_acc(a.data(), b.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(y1[i] == doctest::Approx(y2[i]).epsilon(1e-15));
  }
}

TEST_CASE("tensor ops agree across dispatch targets") {
  if (!k::isa_supported(k::Isa::kAvx2)) return;
  IsaGuard guard;
  Rng rng(12);
  const Tensor a = fdtest::random_tensor({9, 37}, rng);
  const Tensor b = fdtest::random_tensor({37, 13}, rng);
  k::set_isa(k::Isa::kScalar);
  const Tensor ref = matmul(a, b);
  const Tensor ref_bt = matmul_a_bt(a, a);
  k::set_isa(k::Isa::kAvx2);
  CHECK(k::active_isa() == k::Isa::kAvx2);
  const Tensor fast = matmul(a, b);
  const Tensor fast_bt = matmul_a_bt(a, a);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(fast[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < ref_bt.size(); ++i) CHECK(fast_bt[i] == doctest::Approx(ref_bt[i]).epsilon(1e-12));
}
#endif

TEST_CASE("isa selection") {
  IsaGuard guard;
  CHECK(k::isa_supported(k::Isa::kScalar));
  k::set_isa(k::Isa::kScalar);
  CHECK(k::active_isa() == k::Isa::kScalar);
  CHECK(k::isa_name(k::Isa::kScalar) == "scalar");
  if (!k::isa_supported(k::Isa::kAvx2)) CHECK_THROWS_AS(k::set_isa(k::Isa::kAvx2), ConfigError);
}
