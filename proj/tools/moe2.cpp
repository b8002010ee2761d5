// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/trainer.hpp"

using namespace speechmoe;
namespace fs = std::filesystem;

namespace {

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

LogLevel log_level() {
  const char* v = std::getenv("MOE_LOG_LEVEL");
  if (!v || !*v) return LogLevel::kInfo;
  const std::string s = v;
  if (s == "error") return LogLevel::kError;
  if (s == "info") return LogLevel::kInfo;
  if (s == "debug") return LogLevel::kDebug;
  throw ConfigError("MOE_LOG_LEVEL: expected error, info or debug, got '" + s + "'");
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::string out = ".";
  std::string data;
  std::string checkpoint;
  std::string resume;
  std::size_t grad_entries = 8;
  double grad_perturb = 0.05;
};

RunConfig load_run_config(const Options& o) {
  RunConfig rc;
  if (!o.config.empty()) rc = load_config(o.config);
  if (o.seed) {
    rc.model.seed = *o.seed;
    rc.synth.seed = *o.seed;
  }
  if (o.workers) rc.model.n_workers = *o.workers;
  rc.model.validate();
  rc.synth.validate();
  return rc;
}

struct Split {
  std::vector<Utterance> train, test;
};

Split synthesize(const RunConfig& rc) {
  Split s;
  for (auto& u : generate(rc.synth, rc.corpus_size)) {
    (is_held_out(u.utt_id, rc.test_fraction) ? s.test : s.train).push_back(std::move(u));
  }
  return s;
}

std::vector<Utterance> corpus_for(const Options& o, const RunConfig& rc, bool test) {
  if (!o.data.empty()) return read_corpus(fs::path(o.data) / (test ? "test.corpus" : "train.corpus"));
  Split s = synthesize(rc);
  return test ? std::move(s.test) : std::move(s.train);
}

void check_dims(const ModelConfig& m, const std::vector<Utterance>& corpus) {
  for (const auto& u : corpus) {
    if (u.frames.cols() != m.d_feat) {
      throw ConfigError("d_feat: corpus has " + std::to_string(u.frames.cols()) + ", model expects " +
                        std::to_string(m.d_feat));
    }
    if (u.domain_id >= m.n_domains) throw ConfigError("n_domains: corpus domain id " + std::to_string(u.domain_id));
    if (u.accent_id >= m.n_accents) throw ConfigError("n_accents: corpus accent id " + std::to_string(u.accent_id));
    for (auto l : u.labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= m.vocab) throw ConfigError("vocab: corpus label " + std::to_string(l));
    }
  }
}

int cmd_gen_data(const Options& o) {
  const RunConfig rc = load_run_config(o);
  const Split s = synthesize(rc);
  fs::create_directories(o.out);
  write_corpus(fs::path(o.out) / "train.corpus", s.train);
  write_corpus(fs::path(o.out) / "test.corpus", s.test);
  if (log_level() >= LogLevel::kInfo) {
    std::printf("wrote %zu train and %zu test utterances to %s\n", s.train.size(), s.test.size(), o.out.c_str());
  }
  return 0;
}

int cmd_train(const Options& o) {
  const LogLevel level = log_level();
  const RunConfig rc = load_run_config(o);
  const auto corpus = corpus_for(o, rc, false);
  check_dims(rc.model, corpus);
  fs::create_directories(o.out);
  const fs::path metrics_path = fs::path(o.out) / "metrics.csv";
  const bool fresh = !fs::exists(metrics_path) || fs::file_size(metrics_path) == 0;
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());
  if (fresh) metrics << metrics_csv_header() << "\n";

  TrainOptions opts;
  const auto t0 = std::chrono::steady_clock::now();
  opts.on_step = [&](const StepMetrics& m) {
    metrics << metrics_csv_row(m) << "\n";
    metrics.flush();
    if (level == LogLevel::kDebug || (level == LogLevel::kInfo && m.step % 50 == 0)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %zu total %.5f l_c %.5f entropy %.3f (%.1f s)\n", m.step, m.loss.total,
                   m.loss.l_c, m.util_entropy_mean, secs);
    }
  };
  TrainResult r;
  if (!o.resume.empty()) {
    Checkpoint start = load_checkpoint(o.resume);
    start.model.config.steps = rc.model.steps;
    if (o.workers) start.model.config.n_workers = *o.workers;
    r = train_from(std::move(start), corpus, opts);
  } else {
    r = train(rc.model, corpus, opts);
  }
  const fs::path ckpt = fs::path(o.out) / "model.ckpt";
  save_checkpoint(ckpt, r.checkpoint);
  if (level >= LogLevel::kInfo) {
    const auto& last = r.metrics.back().loss;
    std::printf("trained to step %llu: total %.6f l_c %.6f; checkpoint %s\n",
                static_cast<unsigned long long>(r.checkpoint.step), last.total, last.l_c, ckpt.string().c_str());
  }
  return 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  RunConfig rc;
  if (!o.config.empty()) rc = load_config(o.config);
  if (o.seed) rc.synth.seed = *o.seed;
  const auto corpus = corpus_for(o, rc, true);
  check_dims(ck.model.config, corpus);
  const EvalReport report = evaluate(ck.model, corpus);
  write_eval_report(std::cout, report);
  if (!o.out.empty() && o.out != ".") {
    fs::create_directories(o.out);
    std::ofstream os(fs::path(o.out) / "eval.txt");
    if (!os) throw IoError("cannot write eval report under " + o.out);
    write_eval_report(os, report);
  }
  return 0;
}

int cmd_flops(const Options& o) {
  const RunConfig rc = load_run_config(o);
  const FlopBreakdown f = count_flops(rc.model);
  const ParamCounts p = count_params(build_model(rc.model));
  std::printf("flops_per_second_input %llu\n", static_cast<unsigned long long>(f.total()));
  std::printf("  expert %llu\n  router %llu\n  embedding %llu\n  backbone %llu\n",
              static_cast<unsigned long long>(f.expert), static_cast<unsigned long long>(f.router),
              static_cast<unsigned long long>(f.embedding), static_cast<unsigned long long>(f.backbone));
  std::printf("parameters %zu\n  expert %zu\n  router %zu\n  embedding %zu\n  other %zu\n", p.total, p.expert,
              p.router, p.embedding, p.other);
  return 0;
}

int cmd_grad_check(const Options& o) {
  const RunConfig rc = load_run_config(o);
  Model m = build_model(rc.model);
  // Move parameters off their initial values so ReLU kinks and the zero
  // output projection do not mask gradients.
  Rng rng(rc.model.seed + 1);
  m.visit([&](const std::string&, Tensor& t) {
    for (double& v : t.data()) v += o.grad_perturb * normal(rng);
  });
  SynthConfig s = rc.synth;
  s.t_min = std::min<std::size_t>(s.t_min, 8);
  s.t_max = std::min<std::size_t>(std::max(s.t_max, s.t_min), 10);
  s.labels_min = std::min<std::size_t>(s.labels_min, 1);
  s.labels_max = std::min<std::size_t>(s.labels_max, 3);
  const auto batch = generate(s, 2);
  const StepResult r = train_step_local(m, batch);
  std::vector<std::pair<std::string, const Tensor*>> grads;
  r.grads.visit([&](const std::string& name, const Tensor& t) { grads.emplace_back(name, &t); });
  std::size_t idx = 0, failures = 0;
  double worst = 0.0;
  constexpr double eps = 1e-5, rtol = 1e-4;
  m.visit([&](const std::string& name, Tensor& p) {
    const Tensor& g = *grads[idx++].second;
    if (p.is_null()) return;
    const std::size_t stride = std::max<std::size_t>(1, p.size() / o.grad_entries);
    double tensor_worst = 0.0;
    for (std::size_t i = 0; i < p.size(); i += stride) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = train_step_local(m, batch).loss.total;
      p[i] = saved - eps;
      const double down = train_step_local(m, batch).loss.total;
      p[i] = saved;
      const double num = (up - down) / (2 * eps);
      const double tol = rtol * std::max({std::abs(g[i]), std::abs(num), 1e-2});
      tensor_worst = std::max(tensor_worst, std::abs(g[i] - num) / tol);
    }
    worst = std::max(worst, tensor_worst);
    if (tensor_worst > 1.0) ++failures;
    if (log_level() == LogLevel::kDebug || tensor_worst > 1.0) {
      std::printf("%-40s %s (error/tolerance %.3g)\n", name.c_str(), tensor_worst > 1.0 ? "FAIL" : "ok", tensor_worst);
    }
  });
  std::printf("grad-check: %zu tensors, loss %.6g, worst error/tolerance %.3g\n", idx, r.loss.total, worst);
  if (failures) throw NumericError(std::to_string(failures) + " parameter tensors failed the finite-difference check");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SpeechMoE2 desk-scale trainer"};
  app.require_subcommand(1);
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "key=value config file");
    sub->add_option("--seed", o.seed, "override model and data seed");
    sub->add_option("--workers", o.workers, "simulated expert-parallel workers");
    sub->add_option("--out", o.out, "output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "write train/test synthetic corpora");
  common(gen);
  auto* tr = app.add_subcommand("train", "train and write metrics.csv and model.ckpt");
  common(tr);
  tr->add_option("--data", o.data, "directory with train.corpus (default: synthesize from config)");
  tr->add_option("--resume", o.resume, "continue from a checkpoint");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
  common(ev);
  ev->add_option("--checkpoint", o.checkpoint, "checkpoint file")->required();
  ev->add_option("--data", o.data, "directory with test.corpus (default: synthesize from config)");
  auto* fl = app.add_subcommand("flops", "analytic FLOPs per one-second input and parameter counts");
  common(fl);
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the configured model");
  common(gc);
  gc->add_option("--entries", o.grad_entries, "sampled entries per tensor");
  gc->add_option("--perturb", o.grad_perturb, "std of the parameter perturbation before checking");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }
  try {
    log_level();
    if (*gen) return cmd_gen_data(o);
    if (*tr) return cmd_train(o);
    if (*ev) return cmd_eval(o);
    if (*fl) return cmd_flops(o);
    if (*gc) return cmd_grad_check(o);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.category().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
