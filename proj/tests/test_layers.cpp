// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <memory>
#include <numeric>

#include "doctest.h"
#include "fd.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/layers.hpp"

using namespace speechmoe;

namespace {

struct MoEFixture {
  MoELayer layer;
  Tensor x;
  RouterEmbeddings emb;
};

MoEFixture make_moe(std::uint64_t seed, std::size_t n, RouterVariant variant, std::size_t frames = 6) {
  Rng rng(seed);
  const std::size_t d_c = 5, d_a = 3, d_d = 2, d = 4, h = 6;
  const bool aug = variant == RouterVariant::kAugmented;
  MoEFixture f{MoELayer::create(0, n, variant, d_c, aug ? d_a : 0, aug ? d_d : 0, d, h, rng),
               fdtest::random_tensor({frames, d}, rng), {}};
  // larger router weights so probabilities are far from ties
  for (double& v : f.layer.router.weight.data()) v *= 3.0;
  f.emb.e_c = fdtest::random_tensor({frames, d_c}, rng);
  if (aug) {
    f.emb.e_a = fdtest::random_tensor({frames, d_a}, rng);
    f.emb.e_d = fdtest::random_tensor({frames, d_d}, rng);
  }
  return f;
}

// Every expert evaluated on every frame, masked to the router's argmax.
Tensor dense_oracle(const MoELayer& layer, const Tensor& x, const RouterEmbeddings& emb) {
  const std::size_t k = x.rows();
  Tensor out({k, layer.experts[0].out_dim()});
  for (std::size_t j = 0; j < k; ++j) {
    const Tensor xj = x.row_copy(j);
    const RouterDecision dec =
        route(layer.router, emb.e_c.row_copy(j), emb.e_a.is_null() ? Tensor() : emb.e_a.row_copy(j),
              emb.e_d.is_null() ? Tensor() : emb.e_d.row_copy(j), xj);
    for (std::size_t e = 0; e < layer.n_experts(); ++e) {
      const Expert& ex = layer.experts[e];
      const double mask = e == dec.selected ? dec.gate : 0.0;
      for (std::size_t o = 0; o < ex.out_dim(); ++o) {
        double acc = ex.b2[o];
        for (std::size_t hh = 0; hh < ex.hidden_dim(); ++hh) {
          double pre = ex.b1[hh];
          for (std::size_t i = 0; i < ex.in_dim(); ++i) pre += xj[i] * ex.w1.at(i, hh);
          acc += std::max(pre, 0.0) * ex.w2.at(hh, o);
        }
        out.at(j, o) += mask * acc;
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("linear and expert gradients") {
  Rng rng(21);
  Linear lin = Linear::create(5, 3, rng);
  Tensor x = fdtest::random_tensor({4, 5}, rng);
  const Tensor w = fdtest::random_tensor({4, 3}, rng);
  Linear g = lin.zeros_like();
  const Tensor dx = linear_backward(lin, x, w, g);
  auto loss = [&] { return fdtest::weighted(linear_forward(lin, x), w); };
  fdtest::check("linear.w", lin.w, g.w, loss);
  fdtest::check("linear.b", lin.b, g.b, loss);
  fdtest::check("linear.x", x, dx, loss);

  Expert ex = Expert::create(5, 7, 3, rng);
  Expert ge = ex.zeros_like();
  const auto cache = expert_forward(ex, x);
  const Tensor dxe = expert_backward(ex, cache, w, ge);
  auto eloss = [&] { return fdtest::weighted(expert_forward(ex, x).out, w); };
  fdtest::check("expert.w1", ex.w1, ge.w1, eloss);
  fdtest::check("expert.b1", ex.b1, ge.b1, eloss);
  fdtest::check("expert.w2", ex.w2, ge.w2, eloss);
  fdtest::check("expert.b2", ex.b2, ge.b2, eloss);
  fdtest::check("expert.x", x, dxe, eloss);
}

TEST_CASE("route: zero weight gives uniform probabilities and expert 0") {
  Rng rng(1);
  Router r = Router::create(RouterVariant::kBaseline, 3, 0, 0, 2, 4, rng);
  r.weight.fill(0.0);
  const auto d = route(r, Tensor::vector({1, 2, 3}), Tensor(), Tensor(), Tensor::vector({4, 5}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(d.probs[i] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(d.selected == 0);
  CHECK(d.gate == d.probs[0]);
}

TEST_CASE("route: crafted logits [5, -5]") {
  Rng rng(1);
  Router r = Router::create(RouterVariant::kBaseline, 1, 0, 0, 1, 2, rng);
  r.weight = Tensor::matrix({{5, -5}, {0, 0}});
  const auto d = route(r, Tensor::vector({1}), Tensor(), Tensor(), Tensor::vector({0}));
  const double p0 = 1.0 / (1.0 + std::exp(-10.0));
  CHECK(d.probs[0] == doctest::Approx(p0).epsilon(1e-14));
  CHECK(d.probs[0] == doctest::Approx(0.99995).epsilon(1e-5));
  CHECK(d.selected == 0);
}

TEST_CASE("route: permuting expert columns permutes probabilities") {
  Rng rng(4);
  Router r = Router::create(RouterVariant::kBaseline, 3, 0, 0, 2, 3, rng);
  const Tensor ec = fdtest::random_tensor({3}, rng), o = fdtest::random_tensor({2}, rng);
  const auto base = route(r, ec, Tensor(), Tensor(), o);
  const std::size_t perm[] = {2, 0, 1};
  Router rp = r;
  for (std::size_t i = 0; i < r.weight.rows(); ++i) {
    for (std::size_t e = 0; e < 3; ++e) rp.weight.at(i, e) = r.weight.at(i, perm[e]);
  }
  const auto p = route(rp, ec, Tensor(), Tensor(), o);
  for (std::size_t e = 0; e < 3; ++e) CHECK(p.probs[e] == doctest::Approx(base.probs[perm[e]]).epsilon(1e-14));
  CHECK(perm[p.selected] == base.selected);
}

TEST_CASE("route: argmax is temperature invariant and ties go low") {
  const double v[] = {0.3, 0.7, 0.7, 0.1};
  CHECK(argmax(v) == 1);
  Rng rng(8);
  Router r = Router::create(RouterVariant::kBaseline, 3, 0, 0, 2, 5, rng);
  const Tensor ec = fdtest::random_tensor({3}, rng), o = fdtest::random_tensor({2}, rng);
  const auto base = route(r, ec, Tensor(), Tensor(), o);
  for (double c : {0.1, 2.0, 50.0}) {
    Router rc = r;
    for (double& w : rc.weight.data()) w *= c;
    CHECK(route(rc, ec, Tensor(), Tensor(), o).selected == base.selected);
  }
}

TEST_CASE("route: configuration errors") {
  Rng rng(2);
  Router aug = Router::create(RouterVariant::kAugmented, 3, 2, 2, 2, 2, rng);
  CHECK_THROWS_AS(route(aug, Tensor::vector({1, 2, 3}), Tensor(), Tensor(), Tensor::vector({1, 1})), ConfigError);
  CHECK_THROWS_AS(route(aug, Tensor::vector({1, 2}), Tensor::vector({1, 1}), Tensor::vector({1, 1}),
                        Tensor::vector({1, 1})),
                  DimensionError);
  Router base = Router::create(RouterVariant::kBaseline, 3, 0, 0, 2, 2, rng);
  CHECK_THROWS_AS(
      route(base, Tensor::vector({1, 2, 3}), Tensor::vector({1, 1}), Tensor(), Tensor::vector({1, 1})),
      ConfigError);
}

TEST_CASE("moe_forward equals the dense-evaluation oracle exactly") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto variant = seed % 2 ? RouterVariant::kAugmented : RouterVariant::kBaseline;
    const auto f = make_moe(seed, 4, variant, 5);
    FlopCounter flops;
    const auto out = moe_forward(f.layer, f.x, f.emb, &flops);
    const Tensor dense = dense_oracle(f.layer, f.x, f.emb);
    for (std::size_t i = 0; i < dense.size(); ++i) CHECK(out.y[i] == doctest::Approx(dense[i]).epsilon(1e-13));
    CHECK(flops.expert_evaluations == 5);
    CHECK(flops.get(FlopKind::kExpert) == 5 * 2 * f.layer.experts[0].macs_per_frame());
  }
}

TEST_CASE("moe_forward: single expert and identical experts") {
  auto f = make_moe(3, 1, RouterVariant::kBaseline);
  const auto out = moe_forward(f.layer, f.x, f.emb);
  const Tensor ref = expert_forward(f.layer.experts[0], f.x).out;
  CHECK(out.y == ref);
  for (const auto& d : out.decisions) CHECK(d.gate == 1.0);

  auto g = make_moe(4, 3, RouterVariant::kAugmented);
  for (auto& e : g.layer.experts) e = g.layer.experts[0];
  const auto o1 = moe_forward(g.layer, g.x, g.emb);
  const Tensor plain = expert_forward(g.layer.experts[0], g.x).out;
  for (std::size_t j = 0; j < g.x.rows(); ++j) {
    for (std::size_t c = 0; c < plain.cols(); ++c) {
      CHECK(o1.y.at(j, c) == doctest::Approx(o1.decisions[j].gate * plain.at(j, c)).epsilon(1e-15));
    }
  }
}

TEST_CASE("moe per-frame expert FLOPs do not depend on the number of experts") {
  std::uint64_t expert_flops = 0;
  for (std::size_t n : {2u, 4u, 16u}) {
    auto f = make_moe(9, n, RouterVariant::kAugmented);
    FlopCounter flops;
    moe_forward(f.layer, f.x, f.emb, &flops);
    if (expert_flops == 0) expert_flops = flops.get(FlopKind::kExpert);
    CHECK(flops.get(FlopKind::kExpert) == expert_flops);
    const std::uint64_t k = f.x.rows();
    CHECK(flops.get(FlopKind::kRouter) == k * (2 * n * f.layer.router.route_dim() + n));
  }
}

TEST_CASE("moe_backward matches finite differences") {
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    for (auto variant : {RouterVariant::kBaseline, RouterVariant::kAugmented}) {
      auto f = make_moe(seed, 3, variant);
      Rng rng(seed + 100);
      const Tensor w = fdtest::random_tensor({f.x.rows(), 4}, rng);
      const Tensor wp = fdtest::random_tensor({f.x.rows(), 3}, rng);
      auto loss = [&] {
        const auto o = moe_forward(f.layer, f.x, f.emb);
        return fdtest::weighted(o.y, w) + fdtest::weighted(o.cache.router.probs, wp);
      };
      const auto out = moe_forward(f.layer, f.x, f.emb);
      MoELayer g = f.layer.zeros_like();
      const auto back = moe_backward(f.layer, out.cache, w, wp, g);
      fdtest::check("router.w", f.layer.router.weight, g.router.weight, loss);
      for (std::size_t e = 0; e < 3; ++e) {
        fdtest::check("expert.w1", f.layer.experts[e].w1, g.experts[e].w1, loss);
        fdtest::check("expert.b2", f.layer.experts[e].b2, g.experts[e].b2, loss);
      }
      fdtest::check("x", f.x, back.grad_input, loss);
      fdtest::check("e_c", f.emb.e_c, back.router_input.e_c, loss);
      if (variant == RouterVariant::kAugmented) {
        fdtest::check("e_a", f.emb.e_a, back.router_input.e_a, loss);
        fdtest::check("e_d", f.emb.e_d, back.router_input.e_d, loss);
      }
    }
  }
}

TEST_CASE("moe_backward trivial cases and missing cache") {
  auto f = make_moe(5, 3, RouterVariant::kAugmented);
  const auto out = moe_forward(f.layer, f.x, f.emb);
  MoELayer g = f.layer.zeros_like();
  moe_backward(f.layer, out.cache, Tensor::zeros_like(out.y), Tensor(), g);
  g.visit("", [](const std::string&, Tensor& t) {
    for (double v : t.data()) CHECK(v == 0.0);
  });

  auto one = make_moe(6, 1, RouterVariant::kBaseline);
  const auto o1 = moe_forward(one.layer, one.x, one.emb);
  MoELayer g1 = one.layer.zeros_like();
  Rng rng(3);
  moe_backward(one.layer, o1.cache, fdtest::random_tensor(o1.y.shape(), rng), Tensor(), g1);
  for (double v : g1.router.weight.data()) CHECK(v == 0.0);

  MoELayer g2 = f.layer.zeros_like();
  CHECK_THROWS_AS(moe_backward(f.layer, MoECache{}, out.y, Tensor(), g2), StateError);
}

TEST_CASE("memory layer examples") {
  MemoryLayer id{Tensor({1, 3}), 0};
  Rng rng(2);
  const Tensor seq = fdtest::random_tensor({4, 3}, rng);
  CHECK(memory_forward(id, seq) == seq);

  MemoryLayer echo{Tensor({3, 2}), 1};
  echo.taps.at(0, 0) = 1.0;  // tau = -1
  echo.taps.at(0, 1) = 1.0;
  Tensor impulse({4, 2});
  impulse.at(0, 0) = 1.0;
  impulse.at(0, 1) = 2.0;
  const Tensor out = memory_forward(echo, impulse);
  CHECK(out == Tensor::matrix({{1, 2}, {1, 2}, {0, 0}, {0, 0}}));

  MemoryLayer m = MemoryLayer::create(3, 1, rng);
  Tensor far = seq;
  far.at(3, 0) += 5.0;  // outside [0-1, 0+1]
  CHECK(memory_forward(m, far).row_copy(0) == memory_forward(m, seq).row_copy(0));
}

TEST_CASE("memory layer gradients") {
  Rng rng(31);
  MemoryLayer m = MemoryLayer::create(4, 2, rng);
  Tensor seq = fdtest::random_tensor({6, 4}, rng);
  const Tensor w = fdtest::random_tensor({6, 4}, rng);
  MemoryLayer g = m.zeros_like();
  const Tensor dx = memory_backward(m, seq, w, g);
  auto loss = [&] { return fdtest::weighted(memory_forward(m, seq), w); };
  fdtest::check("taps", m.taps, g.taps, loss);
  fdtest::check("seq", seq, dx, loss);
}

TEST_CASE("attention examples") {
  Rng rng(41);
  AttentionLayer a = AttentionLayer::create(4, 3, rng);
  const Tensor x1 = fdtest::random_tensor({1, 4}, rng);
  AttentionCache c1;
  const Tensor y1 = attention_forward(a, x1, &c1);
  CHECK(c1.weights.at(0, 0) == 1.0);
  const Tensor ref1 = add(matmul(matmul(x1, a.wv), a.wo), x1);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y1[i] == doctest::Approx(ref1[i]).epsilon(1e-14));

  const Tensor row = fdtest::random_tensor({1, 4}, rng);
  Tensor same({5, 4});
  for (std::size_t t = 0; t < 5; ++t) std::copy(row.data().begin(), row.data().end(), same.row(t));
  AttentionCache cs;
  attention_forward(a, same, &cs);
  for (double v : cs.weights.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-14));
}

TEST_CASE("attention matches a scalar-loop oracle") {
  Rng rng(42);
  AttentionLayer a = AttentionLayer::create(4, 3, rng);
  const Tensor x = fdtest::random_tensor({5, 4}, rng);
  AttentionCache cache;
  const Tensor y = attention_forward(a, x, &cache);
  const std::size_t T = 5, d = 4, da = 3;
  auto proj = [&](const Tensor& w, std::size_t t, std::size_t j) {
    double s = 0;
    for (std::size_t i = 0; i < d; ++i) s += x.at(t, i) * w.at(i, j);
    return s;
  };
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> score(T);
    double mx = -1e300;
    for (std::size_t u = 0; u < T; ++u) {
      double s = 0;
      for (std::size_t j = 0; j < da; ++j) s += proj(a.wq, t, j) * proj(a.wk, u, j);
      score[u] = s / std::sqrt(static_cast<double>(da));
      mx = std::max(mx, score[u]);
    }
    double z = 0;
    for (double& s : score) z += (s = std::exp(s - mx));
    double rowsum = 0;
    for (std::size_t u = 0; u < T; ++u) rowsum += cache.weights.at(t, u);
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-14));
    for (std::size_t o = 0; o < d; ++o) {
      double out = x.at(t, o);
      for (std::size_t j = 0; j < da; ++j) {
        double ctx = 0;
        for (std::size_t u = 0; u < T; ++u) ctx += score[u] / z * proj(a.wv, u, j);
        out += ctx * a.wo.at(j, o);
      }
      CHECK(y.at(t, o) == doctest::Approx(out).epsilon(1e-12));
    }
  }
}

TEST_CASE("attention gradients") {
  for (std::uint64_t seed : {51u, 52u, 53u, 54u, 55u}) {
    Rng rng(seed);
    AttentionLayer a = AttentionLayer::create(4, 3, rng);
    Tensor x = fdtest::random_tensor({5, 4}, rng);
    const Tensor w = fdtest::random_tensor({5, 4}, rng);
    AttentionCache cache;
    attention_forward(a, x, &cache);
    AttentionLayer g = a.zeros_like();
    const Tensor dx = attention_backward(a, cache, w, g);
    auto loss = [&] { return fdtest::weighted(attention_forward(a, x), w); };
    fdtest::check("wq", a.wq, g.wq, loss);
    fdtest::check("wk", a.wk, g.wk, loss);
    fdtest::check("wv", a.wv, g.wv, loss);
    fdtest::check("wo", a.wo, g.wo, loss);
    fdtest::check("x", x, dx, loss);
  }
  AttentionLayer a = AttentionLayer::create(4, 3, *std::make_unique<Rng>(1));
  AttentionLayer g = a.zeros_like();
  CHECK_THROWS_AS(attention_backward(a, AttentionCache{}, Tensor({2, 4}), g), StateError);
}
