// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "speechmoe/data.hpp"
#include "speechmoe/model.hpp"

namespace speechmoe {

// Everything a config file can set: model/training keys plus corpus synthesis.
struct RunConfig {
  ModelConfig model;
  SynthConfig synth;
  std::size_t corpus_size = 800;
  double test_fraction = 0.2;

  // Copies shared dims (vocab, d_feat, n_domains, n_accents) into `synth`.
  void sync_data_dims();
};

// Flat UTF-8 key=value lines, '#' comments, unknown keys are ConfigErrors.
RunConfig parse_config(std::istream& is, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path);
void apply_config_line(RunConfig& cfg, const std::string& key, const std::string& value);
// Canonical text of the model keys (used in checkpoints).
std::string model_config_text(const ModelConfig& cfg);
ModelConfig parse_model_config_text(const std::string& text);

// ---- metrics -------------------------------------------------------------------
struct StepMetrics {
  std::size_t step = 0;
  LossBreakdown loss;
  // [layer][expert] frames routed in this step's batch.
  std::vector<std::vector<std::size_t>> utilization;
  double util_entropy_mean = 0.0;
  double wall_seconds = 0.0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);
double utilization_entropy(std::span<const std::size_t> counts);

// ---- checkpoints ----------------------------------------------------------------
struct Checkpoint {
  Model model;
  std::uint64_t step = 0;
  std::string rng_state;
};

void save_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint load_checkpoint(std::istream& is);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---- training --------------------------------------------------------------------
struct TrainOptions {
  std::function<void(const StepMetrics&)> on_step;  // optional
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> metrics;
};

// Plain SGD over seeded shuffled batches through the expert-parallel
// simulator. Throws NumericError with the step number on divergence.
TrainResult train(const ModelConfig& config, const std::vector<Utterance>& corpus,
                  const TrainOptions& options = {});
// Continue from a checkpoint for config.steps more steps.
TrainResult train_from(Checkpoint start, const std::vector<Utterance>& corpus,
                       const TrainOptions& options = {});

// ---- evaluation -------------------------------------------------------------------
struct GroupMetrics {
  std::size_t utterances = 0;
  double mean_ctc = 0.0;
  double token_error_rate = 0.0;
  std::size_t edits = 0;
  std::size_t ref_tokens = 0;
};

struct EvalReport {
  GroupMetrics overall;
  std::vector<GroupMetrics> by_domain;
  std::vector<GroupMetrics> by_accent;
  // [utterance][layer][expert] frames routed
  std::vector<std::vector<std::vector<std::size_t>>> utt_utilization;
  std::vector<std::uint32_t> utt_domain;
  std::vector<std::uint32_t> utt_accent;
  // [layer][group] utilization entropy (nats)
  std::vector<std::vector<double>> domain_entropy;
  std::vector<std::vector<double>> accent_entropy;
};

EvalReport evaluate(const Model& model, const std::vector<Utterance>& corpus);
void write_eval_report(std::ostream& os, const EvalReport& report);

// Chi-squared statistic of the (group x expert) utilization table summed
// over layers. `groups[u]` assigns utterance u to a group.
double utilization_chi2(const EvalReport& report, std::span<const std::uint32_t> groups,
                        std::size_t n_groups);

struct PermutationTest {
  double statistic = 0.0;
  double null_quantile = 0.0;  // requested quantile of the permutation null
  bool significant() const { return statistic > null_quantile; }
};
// Label-permutation null for domain (or accent) specialization.
PermutationTest specialization_test(const EvalReport& report, bool by_domain, std::size_t n_domains_or_accents,
                                    std::size_t permutations, double quantile, std::uint64_t seed);

}  // namespace speechmoe
