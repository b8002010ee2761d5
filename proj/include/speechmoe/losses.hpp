// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "speechmoe/tensor.hpp"

namespace speechmoe {

struct LossWeights {
  double alpha = 0.05;  // sparsity L1
  double beta = 0.05;   // mean importance
  double gamma = 0.01;  // embedding CTC
  double eta = 0.1;     // accent classification
  double theta = 0.1;   // domain classification

  void validate() const;
};

struct LossBreakdown {
  double l_c = 0, l_s = 0, l_m = 0, l_e = 0, l_a = 0, l_d = 0;
  double total = 0;
};

// Router probabilities for all k frames at one layer, frame-major [k x n].
struct RouterBatch {
  Tensor probs;

  std::size_t frames() const { return probs.rows(); }
  std::size_t experts() const { return probs.cols(); }
  // Every row must sum to 1 within `tol`.
  void validate(double tol = 1e-10) const;
};

struct ScalarWithGrad {
  double value = 0.0;
  Tensor grad;
};

// ---- CTC ---------------------------------------------------------------------
// Blank is the last symbol (index V). Labels must lie in [0, V).
std::size_t ctc_min_frames(std::span<const std::int32_t> labels);
// -log P(labels | log_probs); gradient is w.r.t. log_probs [T x (V+1)].
ScalarWithGrad ctc_loss(const Tensor& log_probs, std::span<const std::int32_t> labels);
// Convenience: applies row-wise log_softmax to logits; gradient w.r.t. logits.
ScalarWithGrad ctc_loss_from_logits(const Tensor& logits, std::span<const std::int32_t> labels);

// Greedy CTC decode: per-frame argmax, merge repeats, drop blanks.
std::vector<std::int32_t> ctc_greedy_decode(const Tensor& scores);
std::size_t edit_distance(std::span<const std::int32_t> a, std::span<const std::int32_t> b);

// ---- auxiliary router losses ----------------------------------------------------
// L_s = (1/k) sum_j || p_j / ||p_j||_2 ||_1
ScalarWithGrad sparsity_loss(const RouterBatch& batch);
// L_m = n sum_i ((1/k) sum_j p_ij)^2
ScalarWithGrad mean_importance_loss(const RouterBatch& batch);

// ---- classification ----------------------------------------------------------
ScalarWithGrad cross_entropy(const Tensor& logits, std::size_t target);

// ---- combination -------------------------------------------------------------
// total = l_c + alpha l_s + beta l_m + gamma l_e + eta l_a + theta l_d.
// Throws NumericError naming the first non-finite part.
LossBreakdown combine(const LossBreakdown& parts, const LossWeights& w);

}  // namespace speechmoe
