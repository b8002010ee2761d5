// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "speechmoe/errors.hpp"
#include "speechmoe/trainer.hpp"

using namespace speechmoe;

namespace {

ModelConfig quick_config() {
  ModelConfig c;
  c.n_moe_layers = c.n_memory_layers = 2;
  c.attention_every = 2;
  c.d_model = 12;
  c.expert_hidden = 16;
  c.d_att = 8;
  c.d_c = 12;
  c.d_a = 6;
  c.d_d = 6;
  c.batch_size = 6;
  c.steps = 8;
  return c;
}

std::vector<Utterance> quick_corpus(std::size_t n, std::uint64_t stream = 0) {
  SynthConfig s;
  s.t_min = 12;
  s.t_max = 18;
  s.labels_min = 2;
  s.labels_max = 4;
  return generate(s, n, stream);
}

std::string checkpoint_bytes(const Checkpoint& c) {
  std::ostringstream os;
  save_checkpoint(os, c);
  return os.str();
}

// -log of the uniform-posterior CTC probability: T log(V+1) minus the log of
// the number of valid alignments, counted by dynamic programming over paths.
double uniform_ctc(std::size_t T, const std::vector<std::int32_t>& labels, std::size_t V) {
  const std::size_t S = 2 * labels.size() + 1;
  auto sym = [&](std::size_t s) { return s % 2 == 0 ? -1 : labels[s / 2]; };
  std::vector<double> count(S, 0.0), next(S);
  count[0] = 1.0;
  if (S > 1) count[1] = 1.0;
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double c = count[s];
      if (s >= 1) c += count[s - 1];
      if (s >= 2 && sym(s) != -1 && sym(s) != sym(s - 2)) c += count[s - 2];
      next[s] = c;
    }
    count.swap(next);
  }
  const double paths = count[S - 1] + (S > 1 ? count[S - 2] : 0.0);
  return static_cast<double>(T) * std::log(static_cast<double>(V + 1)) - std::log(paths);
}

}  // namespace

TEST_CASE("config parsing") {
  std::istringstream in(
      "# desk run\n"
      "n_experts = 4\n"
      "router=moe1   # baseline\n"
      "learning_rate=0.125\n"
      "domain_prior=1,2,3,4,5,6\n"
      "\n"
      "vocab=5\n");
  const RunConfig rc = parse_config(in);
  CHECK(rc.model.n_experts == 4);
  CHECK(rc.model.router == RouterVariant::kBaseline);
  CHECK(rc.model.learning_rate == 0.125);
  CHECK(rc.synth.domain_prior.size() == 6);
  CHECK(rc.synth.vocab == 5);

  std::istringstream unknown("n_expert=4\n");
  CHECK_THROWS_AS(parse_config(unknown), ConfigError);
  std::istringstream bad_value("n_experts=four\n");
  CHECK_THROWS_AS(parse_config(bad_value), ConfigError);
  std::istringstream no_eq("n_experts\n");
  CHECK_THROWS_AS(parse_config(no_eq), ConfigError);
  std::istringstream bad_router("router=moe3\n");
  CHECK_THROWS_AS(parse_config(bad_router), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), IoError);
}

TEST_CASE("model config text round trips exactly") {
  ModelConfig c = quick_config();
  c.learning_rate = 0.1 + 0.2;  // not exactly representable in short decimal
  c.weights.gamma = 1.0 / 3.0;
  c.router = RouterVariant::kBaseline;
  c.aux_scope = AuxLossScope::kPerWorker;
  c.detach_embeddings = true;
  const std::string text = model_config_text(c);
  const ModelConfig back = parse_model_config_text(text);
  CHECK(back.learning_rate == c.learning_rate);
  CHECK(back.weights.gamma == c.weights.gamma);
  CHECK(model_config_text(back) == text);
}

TEST_CASE("metrics csv and utilization entropy") {
  CHECK(metrics_csv_header() == "step,l_c,l_s,l_m,l_e,l_a,l_d,total,util_entropy_mean");
  StepMetrics m;
  m.step = 3;
  m.loss = {1, 2, 3, 4, 5, 6, 7};
  m.util_entropy_mean = 0.5;
  CHECK(metrics_csv_row(m) == "3,1,2,3,4,5,6,7,0.5");
  const std::size_t even[] = {5, 5};
  const std::size_t skew[] = {10, 0};
  CHECK(utilization_entropy(even) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(utilization_entropy(skew) == 0.0);
}

TEST_CASE("training metrics are deterministic and utilization sums to routed frames") {
  const ModelConfig c = quick_config();
  const auto corpus = quick_corpus(30);
  const auto a = train(c, corpus);
  const auto b = train(c, corpus);
  REQUIRE(a.metrics.size() == c.steps);
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    CHECK(metrics_csv_row(a.metrics[i]) == metrics_csv_row(b.metrics[i]));
    std::size_t first = 0;
    for (std::size_t l = 0; l < a.metrics[i].utilization.size(); ++l) {
      std::size_t s = 0;
      for (auto n : a.metrics[i].utilization[l]) s += n;
      if (l == 0) first = s;
      CHECK(s == first);
    }
  }
  CHECK(checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint));
}

TEST_CASE("zero learning rate leaves the loss unchanged") {
  ModelConfig c = quick_config();
  c.learning_rate = 0.0;
  c.batch_size = 10;
  const auto corpus = quick_corpus(10);
  const auto r = train(c, corpus);
  for (const auto& m : r.metrics) CHECK(m.loss.total == r.metrics.front().loss.total);
}

TEST_CASE("worker count does not change the loss curve") {
  ModelConfig c = quick_config();
  c.steps = 10;
  const auto corpus = quick_corpus(30);
  const auto one = train(c, corpus);
  c.n_workers = 2;
  const auto two = train(c, corpus);
  for (std::size_t i = 0; i < one.metrics.size(); ++i) {
    CHECK(std::abs(one.metrics[i].loss.total - two.metrics[i].loss.total) <= 1e-6);
  }
}

TEST_CASE("checkpoint save, load, save is byte-identical") {
  const ModelConfig c = quick_config();
  const auto corpus = quick_corpus(20);
  const auto r = train(c, corpus);
  const std::string bytes = checkpoint_bytes(r.checkpoint);
  CHECK(bytes.substr(0, 8) == "SMOECKPT");
  std::istringstream in(bytes);
  const Checkpoint loaded = load_checkpoint(in);
  CHECK(checkpoint_bytes(loaded) == bytes);
  CHECK(loaded.step == c.steps);

  const auto held = quick_corpus(10, 1);
  std::ostringstream e1, e2;
  write_eval_report(e1, evaluate(r.checkpoint.model, held));
  write_eval_report(e2, evaluate(loaded.model, held));
  CHECK(e1.str() == e2.str());
  const EvalReport ra = evaluate(r.checkpoint.model, held);
  const EvalReport rb = evaluate(loaded.model, held);
  CHECK(ra.overall.mean_ctc == rb.overall.mean_ctc);

  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(truncated), FormatError);
  std::string wrong = bytes;
  wrong[0] = 'X';
  std::istringstream bad_magic(wrong);
  CHECK_THROWS_AS(load_checkpoint(bad_magic), FormatError);
}

TEST_CASE("resuming from a checkpoint continues the same run") {
  ModelConfig c = quick_config();
  c.steps = 6;
  const auto corpus = quick_corpus(25);
  const auto full = train(c, corpus);
  c.steps = 3;
  const auto first = train(c, corpus);
  std::istringstream in(checkpoint_bytes(first.checkpoint));
  const auto second = train_from(load_checkpoint(in), corpus);
  REQUIRE(second.metrics.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(second.metrics[i].step == full.metrics[i + 3].step);
    CHECK(second.metrics[i].loss.total == full.metrics[i + 3].loss.total);
  }
  CHECK(second.checkpoint.step == 6);
}

TEST_CASE("divergence reports the step number") {
  ModelConfig c = quick_config();
  c.learning_rate = 1e6;
  c.max_grad_norm = 0.0;
  c.steps = 50;
  try {
    train(c, quick_corpus(20));
    FAIL("expected divergence");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).rfind("step ", 0) == 0);
  }
  CHECK_THROWS_AS(train(quick_config(), {}), ConfigError);
}

TEST_CASE("untrained evaluation matches the uniform-posterior CTC value") {
  const ModelConfig c = quick_config();
  const Model m = build_model(c);
  const auto corpus = quick_corpus(30);
  double expect = 0.0;
  for (const auto& u : corpus) expect += uniform_ctc(u.num_frames(), u.labels, c.vocab);
  expect /= static_cast<double>(corpus.size());
  const EvalReport r = evaluate(m, corpus);
  CHECK(std::abs(r.overall.mean_ctc - expect) <= 0.1 * expect);
  CHECK(r.overall.mean_ctc == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("single-domain evaluation has one row equal to the aggregate") {
  SynthConfig s;
  s.n_domains = 1;
  const auto corpus = generate(s, 12);
  ModelConfig c = quick_config();
  c.n_domains = 1;
  const EvalReport r = evaluate(build_model(c), corpus);
  REQUIRE(r.by_domain.size() == 1);
  CHECK(r.by_domain[0].mean_ctc == r.overall.mean_ctc);
  CHECK(r.by_domain[0].token_error_rate == r.overall.token_error_rate);
  CHECK(r.by_domain[0].utterances == r.overall.utterances);

  Utterance stray = corpus[0];
  stray.domain_id = 3;
  CHECK_THROWS_AS(evaluate(build_model(c), {stray}), LabelError);
}

TEST_CASE("a short training run beats the random token error rate") {
  ModelConfig c = quick_config();
  c.steps = 250;
  c.batch_size = 8;
  const auto corpus = quick_corpus(200);
  const auto r = train(c, corpus);
  const EvalReport e = evaluate(r.checkpoint.model, corpus);
  MESSAGE("train TER " << e.overall.token_error_rate);
  CHECK(e.overall.token_error_rate < 1.0 - 1.0 / static_cast<double>(c.vocab));
}

TEST_CASE("loss trends down over 300 steps") {
  ModelConfig c = quick_config();
  c.steps = 300;
  c.batch_size = 8;
  const auto r = train(c, quick_corpus(200));
  auto median = [&](std::size_t begin) {
    std::vector<double> v;
    for (std::size_t i = begin; i < begin + 50; ++i) v.push_back(r.metrics[i].loss.total);
    std::nth_element(v.begin(), v.begin() + 25, v.end());
    return v[25];
  };
  CHECK(median(250) < median(0));
}

TEST_CASE("utilization chi-squared and the permutation null") {
  EvalReport r;
  // 20 utterances, 1 layer, 2 experts; group g uses expert g only
  for (std::uint32_t u = 0; u < 20; ++u) {
    const std::uint32_t g = u % 2;
    r.utt_utilization.push_back({{g == 0 ? 10u : 0u, g == 1 ? 10u : 0u}});
    r.utt_domain.push_back(g);
    r.utt_accent.push_back(0);
  }
  CHECK(utilization_chi2(r, r.utt_domain, 2) == doctest::Approx(200.0).epsilon(1e-12));
  CHECK(utilization_chi2(r, r.utt_accent, 1) == 0.0);
  const auto t = specialization_test(r, true, 2, 200, 0.99, 3);
  CHECK(t.statistic == doctest::Approx(200.0));
  CHECK(t.null_quantile < t.statistic);
  CHECK(t.significant());
  const std::uint32_t short_groups[] = {0, 1};
  CHECK_THROWS_AS(utilization_chi2(r, short_groups, 2), DimensionError);
}
