// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "fd.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/model.hpp"

using namespace speechmoe;

namespace {

ModelConfig tiny_config(RouterVariant variant) {
  ModelConfig c;
  c.n_moe_layers = c.n_memory_layers = 2;
  c.attention_every = 2;
  c.n_experts = 3;
  c.d_model = 5;
  c.expert_hidden = 6;
  c.d_att = 4;
  c.memory_order = 1;
  c.embed_memory_layers = 1;
  c.d_c = 4;
  c.d_a = 3;
  c.d_d = 2;
  c.vocab = 3;
  c.d_feat = 4;
  c.n_domains = 3;
  c.n_accents = 2;
  c.router = variant;
  return c;
}

std::vector<Utterance> tiny_batch(const ModelConfig& c, std::uint64_t seed) {
  SynthConfig s;
  s.vocab = c.vocab;
  s.d_feat = c.d_feat;
  s.n_domains = c.n_domains;
  s.n_accents = c.n_accents;
  s.t_min = 7;
  s.t_max = 9;
  s.labels_min = 1;
  s.labels_max = 3;
  s.seed = seed;
  return generate(s, 3);
}

}  // namespace

TEST_CASE("build_model layer counts") {
  ModelConfig desk;
  const Model m = build_model(desk);
  CHECK(m.moe.size() == 6);
  CHECK(m.memory.size() == 6);
  CHECK(m.attention.size() == 2);

  ModelConfig deep = desk;
  deep.n_moe_layers = deep.n_memory_layers = 30;
  deep.attention_every = 10;
  const Model p = build_model(deep);
  CHECK(p.moe.size() == 30);
  CHECK(p.memory.size() == 30);
  CHECK(p.attention.size() == 3);
  CHECK(p.attention_after(9) == 0);
  CHECK(p.attention_after(10) == -1);
  CHECK(p.attention_after(29) == 2);
}

TEST_CASE("config validation names the offending key") {
  auto expect_key = [](ModelConfig c, const std::string& key) {
    try {
      c.validate();
      FAIL("expected ConfigError for " << key);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).rfind(key, 0) == 0);
    }
  };
  ModelConfig c;
  c.n_memory_layers = 5;
  expect_key(c, "n_memory_layers");
  c = {};
  c.d_a = 0;
  expect_key(c, "d_a");
  c = {};
  c.n_experts = 0;
  expect_key(c, "n_experts");
  c = {};
  c.weights.gamma = -0.1;
  expect_key(c, "gamma");
  c = {};
  c.router = RouterVariant::kBaseline;
  c.d_a = 0;
  CHECK_NOTHROW(c.validate());
  const LossWeights w = c.effective_weights();
  CHECK(w.eta == 0.0);
  CHECK(w.theta == 0.0);
}

TEST_CASE("parameter-count audit") {
  ModelConfig c;
  const auto p2 = count_params(build_model(c));
  c.n_experts = 4;
  const auto p4 = count_params(build_model(c));
  CHECK(p4.expert == 2 * p2.expert);
  CHECK(p4.embedding == p2.embedding);
  CHECK(p4.other == p2.other);
  CHECK(p4.router - p2.router == c.n_moe_layers * 2 * c.route_dim());
  CHECK(p2.total == p2.expert + p2.router + p2.embedding + p2.other);
  std::size_t visited = 0;
  const Model m = build_model(c);
  m.visit([&](const std::string&, const Tensor& t) { visited += t.size(); });
  CHECK(visited == count_params(m).total);
}

TEST_CASE("trace-counted inference FLOPs equal the analytic count") {
  for (auto variant : {RouterVariant::kBaseline, RouterVariant::kAugmented}) {
    for (std::size_t n : {2u, 4u, 16u}) {
      ModelConfig c;
      c.router = variant;
      c.n_experts = n;
      const Model m = build_model(c);
      Rng rng(n);
      Utterance u;
      u.frames = fdtest::random_tensor({c.frames_per_second, c.d_feat}, rng);
      FlopCounter trace;
      infer(m, u, &trace);
      const FlopBreakdown analytic = count_flops(c);
      const FlopBreakdown traced = to_breakdown(trace);
      CHECK(traced.expert == analytic.expert);
      CHECK(traced.router == analytic.router);
      CHECK(traced.embedding == analytic.embedding);
      CHECK(traced.backbone == analytic.backbone);
      CHECK(trace.expert_evaluations == c.n_moe_layers * c.frames_per_second);
    }
  }
}

TEST_CASE("expert FLOPs are invariant in the number of experts") {
  ModelConfig c;
  c.n_experts = 2;
  const FlopBreakdown f2 = count_flops(c);
  for (std::size_t n : {4u, 16u}) {
    c.n_experts = n;
    const FlopBreakdown f = count_flops(c);
    CHECK(f.expert == f2.expert);
    CHECK(f.embedding == f2.embedding);
    CHECK(f.backbone == f2.backbone);
    const std::uint64_t extra = c.n_moe_layers * c.frames_per_second * (n - 2) * (2 * c.route_dim() + 1);
    CHECK(f.total() - f2.total() == extra);
  }
  ModelConfig zero = c;
  zero.n_moe_layers = zero.n_memory_layers = 0;
  CHECK(count_flops(zero).total() == 0);
}

TEST_CASE("full model gradient matches finite differences") {
  for (auto variant : {RouterVariant::kBaseline, RouterVariant::kAugmented}) {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
      ModelConfig c = tiny_config(variant);
      c.seed = seed;
      Model m = build_model(c);
      // Zero biases put dead-input frames exactly on ReLU kinks, and the zero
      // output init hides most gradients; move every parameter off its init.
      Rng rng(seed + 50);
      m.visit([&](const std::string&, Tensor& t) {
        for (double& v : t.data()) v += 0.3 * normal(rng);
      });
      const auto batch = tiny_batch(c, seed);
      const StepResult r = train_step_local(m, batch);
      CHECK(std::abs(r.loss.total - combine(r.loss, c.effective_weights()).total) < 1e-12);
      auto loss = [&] { return train_step_local(m, batch).loss.total; };
      std::vector<std::pair<std::string, Tensor*>> params;
      m.visit([&](const std::string& name, Tensor& t) { params.emplace_back(name, &t); });
      std::vector<const Tensor*> grads;
      r.grads.visit([&](const std::string&, const Tensor& t) { grads.push_back(&t); });
      REQUIRE(params.size() == grads.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].second->is_null()) continue;
        fdtest::check(params[i].first, *params[i].second, *grads[i], loss, 6);
      }
    }
  }
}

TEST_CASE("detached embeddings receive no router gradient") {
  ModelConfig c = tiny_config(RouterVariant::kAugmented);
  c.weights = LossWeights{0.05, 0.05, 0.0, 0.0, 0.0};
  c.detach_embeddings = true;
  const Model m = build_model(c);
  const auto batch = tiny_batch(c, 9);
  StepResult r = train_step_local(m, batch);
  r.grads.embedding.visit("", [](const std::string&, Tensor& t) {
    for (double v : t.data()) CHECK(v == 0.0);
  });
  c.detach_embeddings = false;
  StepResult j = train_step_local(build_model(c), batch);
  double mass = 0.0;
  j.grads.embedding.visit("", [&](const std::string&, Tensor& t) {
    for (double v : t.data()) mass += std::abs(v);
  });
  CHECK(mass > 0.0);
}

TEST_CASE("untrained model emits uniform CTC posteriors") {
  ModelConfig c;
  const Model m = build_model(c);
  const auto batch = tiny_batch(c, 4);
  for (const auto& u : batch) {
    const Tensor logits = infer(m, u);
    const Tensor p = softmax_rows(logits);
    for (double v : p.data()) CHECK(v == doctest::Approx(1.0 / static_cast<double>(c.vocab + 1)).epsilon(1e-12));
  }
}

TEST_CASE("sgd update moves parameters against the gradient") {
  ModelConfig c = tiny_config(RouterVariant::kAugmented);
  Model m = build_model(c);
  const Model before = m;
  Model g = m.zeros_like();
  g.input.b.fill(2.0);
  sgd_update(m, g, 0.5);
  for (std::size_t i = 0; i < m.input.b.size(); ++i) CHECK(m.input.b[i] == before.input.b[i] - 1.0);
  CHECK(m.input.w == before.input.w);
}
