// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fd.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/tensor.hpp"

using namespace speechmoe;

TEST_CASE("tensor construction and shape checks") {
  Tensor t({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(Tensor().is_null());
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({1, 1, 1, 1}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
  CHECK(m.at(1, 0) == 3);
  CHECK_THROWS_AS(Tensor::matrix({{1, 2}, {3}}), DimensionError);
}

TEST_CASE("matmul small example") {
  const Tensor a = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  const Tensor b = Tensor::matrix({{7, 8}, {9, 10}, {11, 12}});
  const Tensor c = matmul(a, b);
  CHECK(c == Tensor::matrix({{58, 64}, {139, 154}}));
  const Tensor v = matmul(Tensor::vector({1, 0, -1}), b);
  CHECK(v == Tensor::vector({-4, -4}));
  CHECK_THROWS_AS(matmul(b, b), DimensionError);
  CHECK(matmul_a_bt(a, a) == Tensor::matrix({{14, 32}, {32, 77}}));
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(3);
  Tensor a = fdtest::random_tensor({4, 5}, rng);
  Tensor b = fdtest::random_tensor({5, 3}, rng);
  const Tensor w = fdtest::random_tensor({4, 3}, rng);
  const auto g = matmul_backward(a, b, w);
  auto loss = [&] { return fdtest::weighted(matmul(a, b), w); };
  fdtest::check("da", a, g.da, loss);
  fdtest::check("db", b, g.db, loss);
  Tensor acc({5, 3});
  matmul_at_b_acc(a, w, acc);
  for (std::size_t i = 0; i < acc.size(); ++i) CHECK(acc[i] == doctest::Approx(g.db[i]).epsilon(1e-12));
}

TEST_CASE("softmax is shift invariant and sums to one") {
  const Tensor x = Tensor::vector({1000.0, 1001.0, 999.0});
  const Tensor p = softmax(x);
  CHECK(std::accumulate(p.data().begin(), p.data().end(), 0.0) == doctest::Approx(1.0).epsilon(1e-15));
  const Tensor q = softmax(Tensor::vector({1.0, 2.0, 0.0}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-14));
  CHECK(p.all_finite());
  const Tensor lp = log_softmax(Tensor::vector({-1000.0, 0.0}));
  CHECK(lp[0] == doctest::Approx(-1000.0));
  CHECK(lp[1] == doctest::Approx(0.0));
  CHECK_THROWS_AS(softmax(Tensor()), DimensionError);
}

TEST_CASE("softmax family gradients") {
  Rng rng(5);
  Tensor x = fdtest::random_tensor({3, 6}, rng, 2.0);
  const Tensor w = fdtest::random_tensor({3, 6}, rng);
  fdtest::check("softmax_rows", x, softmax_rows_backward(softmax_rows(x), w),
                [&] { return fdtest::weighted(softmax_rows(x), w); });
  fdtest::check("log_softmax_rows", x, log_softmax_rows_backward(log_softmax_rows(x), w),
                [&] { return fdtest::weighted(log_softmax_rows(x), w); });
  Tensor v = fdtest::random_tensor({7}, rng);
  const Tensor wv = fdtest::random_tensor({7}, rng);
  fdtest::check("softmax", v, softmax_backward(softmax(v), wv), [&] { return fdtest::weighted(softmax(v), wv); });
  fdtest::check("log_softmax", v, log_softmax_backward(log_softmax(v), wv),
                [&] { return fdtest::weighted(log_softmax(v), wv); });
}

TEST_CASE("concat and split are inverse") {
  Rng rng(7);
  const Tensor a = fdtest::random_tensor({3, 2}, rng);
  const Tensor b = fdtest::random_tensor({3, 4}, rng);
  const Tensor parts[] = {a, b};
  const Tensor c = concat(parts, 1);
  CHECK(c.shape() == Shape{3, 6});
  CHECK(c.at(2, 1) == a.at(2, 1));
  CHECK(c.at(2, 5) == b.at(2, 3));
  const std::size_t sizes[] = {2, 4};
  const auto back = split(c, 1, sizes);
  CHECK(back[0] == a);
  CHECK(back[1] == b);
  const Tensor rows[] = {a, a};
  CHECK(concat(rows, 0).shape() == Shape{6, 2});
  const Tensor bad[] = {a, Tensor({2, 4})};
  CHECK_THROWS_AS(concat(bad, 1), DimensionError);
  const std::size_t wrong[] = {1, 1};
  CHECK_THROWS_AS(split(c, 1, wrong), DimensionError);
}

TEST_CASE("mean over time and its gradient") {
  const Tensor seq = Tensor::matrix({{1, 2}, {3, 4}, {5, 9}});
  CHECK(mean_over_time(seq) == Tensor::vector({3, 5}));
  const Tensor g = mean_over_time_backward(Tensor::vector({3, 6}), 3);
  CHECK(g == Tensor::matrix({{1, 2}, {1, 2}, {1, 2}}));
  CHECK_THROWS_AS(mean_over_time(Tensor()), EmptySequenceError);
}

TEST_CASE("elementwise helpers") {
  const Tensor x = Tensor::vector({-1, 0, 2});
  CHECK(relu(x) == Tensor::vector({0, 0, 2}));
  CHECK(relu_backward(x, Tensor::vector({5, 5, 5})) == Tensor::vector({0, 0, 5}));
  Tensor m = Tensor::matrix({{1, 1}, {2, 2}});
  add_bias_rows(m, Tensor::vector({10, 20}));
  CHECK(m == Tensor::matrix({{11, 21}, {12, 22}}));
  Tensor bg({2});
  bias_grad_acc(m, bg);
  CHECK(bg == Tensor::vector({23, 43}));
  CHECK(scale(x, 2.0) == Tensor::vector({-2, 0, 4}));
  CHECK_THROWS_AS(add(x, m), DimensionError);
  CHECK(slice_rows(m, 1, 2) == Tensor::matrix({{12, 22}}));
}
