// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "speechmoe/binary_io.hpp"
#include "speechmoe/errors.hpp"
#include "speechmoe/parallel.hpp"
#include "speechmoe/rng.hpp"

namespace speechmoe {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;
// Keeps the batch-order stream separate from parameter init.
constexpr std::uint64_t kShuffleSalt = 0x5eed'ba7c'4e55'0001ULL;

std::string rng_text(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

Rng rng_from_text(const std::string& text) {
  Rng rng;
  std::istringstream is(text);
  is >> rng;
  if (!is) throw FormatError("corrupt RNG state in checkpoint");
  return rng;
}

// Partial Fisher-Yates: `k` distinct indices from [0, n), in ascending order.
std::vector<std::size_t> sample_batch(Rng& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_index(rng, n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

TrainResult run_training(Model model, std::uint64_t start_step, Rng rng,
                         const std::vector<Utterance>& corpus, const TrainOptions& options) {
  const ModelConfig& cfg = model.config;
  cfg.validate();
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  TrainResult result;
  result.metrics.reserve(cfg.steps);
  std::vector<Utterance> batch;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const std::uint64_t step = start_step + s + 1;
    const auto t0 = std::chrono::steady_clock::now();
    batch.clear();
    for (std::size_t i : sample_batch(rng, corpus.size(), cfg.batch_size)) batch.push_back(corpus[i]);

    StepResult r;
    try {
      r = step_parallel(model, batch, cfg.n_workers, cfg.aux_scope);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    double sq = 0.0;
    r.grads.visit([&](const std::string&, const Tensor& g) {
      for (double v : g.data()) sq += v * v;
    });
    if (!std::isfinite(sq)) throw NumericError("step " + std::to_string(step) + ": non-finite gradient");
    const double norm = std::sqrt(sq);
    const double clip = cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm ? cfg.max_grad_norm / norm : 1.0;
    sgd_update(model, r.grads, cfg.learning_rate * clip);

    StepMetrics m;
    m.step = step;
    m.loss = r.loss;
    m.utilization.resize(r.selected.size());
    double ent = 0.0;
    for (std::size_t l = 0; l < r.selected.size(); ++l) {
      m.utilization[l].assign(cfg.n_experts, 0);
      for (std::size_t e : r.selected[l]) ++m.utilization[l][e];
      ent += utilization_entropy(m.utilization[l]);
    }
    m.util_entropy_mean = r.selected.empty() ? 0.0 : ent / static_cast<double>(r.selected.size());
    m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (options.on_step) options.on_step(m);
    result.metrics.push_back(std::move(m));
  }
  result.checkpoint.model = std::move(model);
  result.checkpoint.step = start_step + cfg.steps;
  result.checkpoint.rng_state = rng_text(rng);
  return result;
}

void accumulate(GroupMetrics& g, double ctc, std::size_t edits, std::size_t ref) {
  ++g.utterances;
  g.mean_ctc += ctc;
  g.edits += edits;
  g.ref_tokens += ref;
}

void finalize(GroupMetrics& g) {
  if (g.utterances > 0) g.mean_ctc /= static_cast<double>(g.utterances);
  g.token_error_rate = g.ref_tokens > 0 ? static_cast<double>(g.edits) / static_cast<double>(g.ref_tokens) : 0.0;
}

void write_group(std::ostream& os, const std::string& name, const GroupMetrics& g) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s utts=%-5zu ctc=%.4f ter=%.4f\n", name.c_str(), g.utterances,
                g.mean_ctc, g.token_error_rate);
  os << buf;
}

}  // namespace

// ---- metrics -----------------------------------------------------------------------

std::string metrics_csv_header() { return "step,l_c,l_s,l_m,l_e,l_a,l_d,total,util_entropy_mean"; }

std::string metrics_csv_row(const StepMetrics& m) {
  char buf[320];
  const LossBreakdown& l = m.loss;
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", m.step, l.l_c, l.l_s, l.l_m,
                l.l_e, l.l_a, l.l_d, l.total, m.util_entropy_mean);
  return buf;
}

double utilization_entropy(std::span<const std::size_t> counts) {
  const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
  if (total == 0.0) return 0.0;
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    h -= p * std::log(p);
  }
  return h;
}

// ---- checkpoints --------------------------------------------------------------------

void save_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  os.write("SMOECKPT", 8);
  binio::write<std::uint32_t>(os, kCheckpointVersion);
  binio::write_string(os, model_config_text(ckpt.model.config));
  binio::write<std::uint64_t>(os, ckpt.step);
  binio::write_string(os, ckpt.rng_state);
  std::uint32_t count = 0;
  ckpt.model.visit([&](const std::string&, const Tensor& t) { count += t.is_null() ? 0 : 1; });
  binio::write<std::uint32_t>(os, count);
  ckpt.model.visit([&](const std::string& name, const Tensor& t) {
    if (t.is_null()) return;
    binio::write_string(os, name);
    binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) binio::write<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.data()) binio::write<double>(os, v);
  });
  if (!os) throw IoError("failed writing checkpoint");
}

Checkpoint load_checkpoint(std::istream& is) {
  binio::expect_magic(is, "SMOECKPT");
  const auto version = binio::read<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const ModelConfig cfg = parse_model_config_text(binio::read_string(is));
  ckpt.model = build_model(cfg);
  ckpt.step = binio::read<std::uint64_t>(is);
  ckpt.rng_state = binio::read_string(is);
  rng_from_text(ckpt.rng_state);

  std::uint32_t expected = 0;
  ckpt.model.visit([&](const std::string&, const Tensor& t) { expected += t.is_null() ? 0 : 1; });
  const auto count = binio::read<std::uint32_t>(is);
  if (count != expected) {
    throw FormatError("checkpoint has " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(expected));
  }
  ckpt.model.visit([&](const std::string& name, Tensor& t) {
    if (t.is_null()) return;
    const std::string got = binio::read_string(is);
    if (got != name) throw FormatError("checkpoint tensor '" + got + "' where '" + name + "' expected");
    const auto rank = binio::read<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& d : shape) d = binio::read<std::uint32_t>(is);
    if (shape != t.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                        shape_str(t.shape()));
    }
    for (double& v : t.data()) v = binio::read<double>(is);
  });
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  save_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  return load_checkpoint(is);
}

// ---- training -----------------------------------------------------------------------

TrainResult train(const ModelConfig& config, const std::vector<Utterance>& corpus, const TrainOptions& options) {
  config.validate();
  return run_training(build_model(config), 0, Rng(config.seed ^ kShuffleSalt), corpus, options);
}

TrainResult train_from(Checkpoint start, const std::vector<Utterance>& corpus, const TrainOptions& options) {
  Rng rng = rng_from_text(start.rng_state);
  return run_training(std::move(start.model), start.step, rng, corpus, options);
}

// ---- evaluation ---------------------------------------------------------------------

EvalReport evaluate(const Model& model, const std::vector<Utterance>& corpus) {
  const ModelConfig& cfg = model.config;
  const std::size_t n_layers = model.moe.size();
  EvalReport rep;
  rep.by_domain.resize(cfg.n_domains);
  rep.by_accent.resize(cfg.n_accents);
  // [layer][group][expert]
  std::vector<std::vector<std::vector<std::size_t>>> dom_counts(
      n_layers, std::vector<std::vector<std::size_t>>(cfg.n_domains, std::vector<std::size_t>(cfg.n_experts, 0)));
  auto acc_counts = std::vector<std::vector<std::vector<std::size_t>>>(
      n_layers, std::vector<std::vector<std::size_t>>(cfg.n_accents, std::vector<std::size_t>(cfg.n_experts, 0)));

  for (const Utterance& u : corpus) {
    if (u.domain_id >= cfg.n_domains || u.accent_id >= cfg.n_accents) {
      throw LabelError("utterance " + u.utt_id + " has a domain or accent id outside the model's range");
    }
    std::vector<std::vector<std::size_t>> selected;
    const Tensor logits = infer(model, u, nullptr, &selected);
    const double ctc = ctc_loss_from_logits(logits, u.labels).value;
    const auto hyp = ctc_greedy_decode(logits);
    const std::size_t edits = edit_distance(hyp, u.labels);
    accumulate(rep.overall, ctc, edits, u.labels.size());
    accumulate(rep.by_domain[u.domain_id], ctc, edits, u.labels.size());
    accumulate(rep.by_accent[u.accent_id], ctc, edits, u.labels.size());

    std::vector<std::vector<std::size_t>> util(n_layers, std::vector<std::size_t>(cfg.n_experts, 0));
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t e : selected[l]) {
        ++util[l][e];
        ++dom_counts[l][u.domain_id][e];
        ++acc_counts[l][u.accent_id][e];
      }
    }
    rep.utt_utilization.push_back(std::move(util));
    rep.utt_domain.push_back(u.domain_id);
    rep.utt_accent.push_back(u.accent_id);
  }
  finalize(rep.overall);
  for (auto& g : rep.by_domain) finalize(g);
  for (auto& g : rep.by_accent) finalize(g);
  rep.domain_entropy.assign(n_layers, {});
  rep.accent_entropy.assign(n_layers, {});
  for (std::size_t l = 0; l < n_layers; ++l) {
    for (const auto& c : dom_counts[l]) rep.domain_entropy[l].push_back(utilization_entropy(c));
    for (const auto& c : acc_counts[l]) rep.accent_entropy[l].push_back(utilization_entropy(c));
  }
  return rep;
}

void write_eval_report(std::ostream& os, const EvalReport& rep) {
  write_group(os, "overall", rep.overall);
  for (std::size_t d = 0; d < rep.by_domain.size(); ++d) {
    if (rep.by_domain[d].utterances > 0) write_group(os, "domain" + std::to_string(d), rep.by_domain[d]);
  }
  for (std::size_t a = 0; a < rep.by_accent.size(); ++a) {
    if (rep.by_accent[a].utterances > 0) write_group(os, "accent" + std::to_string(a), rep.by_accent[a]);
  }
  for (std::size_t l = 0; l < rep.domain_entropy.size(); ++l) {
    os << "layer" << l << " domain_entropy";
    for (double h : rep.domain_entropy[l]) os << ' ' << h;
    os << "\nlayer" << l << " accent_entropy";
    for (double h : rep.accent_entropy[l]) os << ' ' << h;
    os << '\n';
  }
}

double utilization_chi2(const EvalReport& report, std::span<const std::uint32_t> groups, std::size_t n_groups) {
  if (groups.size() != report.utt_utilization.size()) {
    throw DimensionError("group labels cover " + std::to_string(groups.size()) + " utterances, report has " +
                         std::to_string(report.utt_utilization.size()));
  }
  if (report.utt_utilization.empty()) return 0.0;
  const std::size_t n_layers = report.utt_utilization.front().size();
  double chi2 = 0.0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::size_t n_exp = report.utt_utilization.front()[l].size();
    std::vector<std::vector<double>> table(n_groups, std::vector<double>(n_exp, 0.0));
    for (std::size_t u = 0; u < groups.size(); ++u) {
      if (groups[u] >= n_groups) throw LabelError("group id out of range");
      for (std::size_t e = 0; e < n_exp; ++e) table[groups[u]][e] += static_cast<double>(report.utt_utilization[u][l][e]);
    }
    std::vector<double> row(n_groups, 0.0), col(n_exp, 0.0);
    double total = 0.0;
    for (std::size_t g = 0; g < n_groups; ++g) {
      for (std::size_t e = 0; e < n_exp; ++e) {
        row[g] += table[g][e];
        col[e] += table[g][e];
        total += table[g][e];
      }
    }
    if (total == 0.0) continue;
    for (std::size_t g = 0; g < n_groups; ++g) {
      for (std::size_t e = 0; e < n_exp; ++e) {
        const double expect = row[g] * col[e] / total;
        if (expect > 0.0) chi2 += (table[g][e] - expect) * (table[g][e] - expect) / expect;
      }
    }
  }
  return chi2;
}

PermutationTest specialization_test(const EvalReport& report, bool by_domain, std::size_t n_groups,
                                    std::size_t permutations, double quantile, std::uint64_t seed) {
  if (permutations == 0) throw ConfigError("permutations must be positive");
  if (!(quantile >= 0.0 && quantile <= 1.0)) throw ConfigError("quantile must lie in [0, 1]");
  std::vector<std::uint32_t> labels = by_domain ? report.utt_domain : report.utt_accent;
  PermutationTest out;
  out.statistic = utilization_chi2(report, labels, n_groups);
  Rng rng(seed);
  std::vector<double> null_stats;
  null_stats.reserve(permutations);
  for (std::size_t p = 0; p < permutations; ++p) {
    for (std::size_t i = labels.size(); i > 1; --i) std::swap(labels[i - 1], labels[uniform_index(rng, i)]);
    null_stats.push_back(utilization_chi2(report, labels, n_groups));
  }
  std::sort(null_stats.begin(), null_stats.end());
  const auto idx = static_cast<std::size_t>(std::floor(quantile * static_cast<double>(permutations - 1)));
  out.null_quantile = null_stats[idx];
  return out;
}

}  // namespace speechmoe
