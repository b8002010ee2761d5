// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "speechmoe/errors.hpp"
#include "speechmoe/layers.hpp"

namespace speechmoe {

void LossWeights::validate() const {
  const std::pair<const char*, double> ws[] = {
      {"alpha", alpha}, {"beta", beta}, {"gamma", gamma}, {"eta", eta}, {"theta", theta}};
  for (const auto& [name, w] : ws) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError(std::string(name) + ": loss weight must be finite and >= 0");
  }
}

void RouterBatch::validate(double tol) const {
  if (probs.rank() != 2) throw DimensionError("router batch must be [k x n]");
  for (std::size_t j = 0; j < frames(); ++j) {
    double s = 0.0;
    for (double p : probs.row_span(j)) s += p;
    if (std::abs(s - 1.0) > tol) {
      throw DegenerateDistributionError("router probabilities of frame " + std::to_string(j) +
                                        " sum to " + std::to_string(s));
    }
  }
}

// ---- CTC -----------------------------------------------------------------------------

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

}  // namespace

std::size_t ctc_min_frames(std::span<const std::int32_t> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++n;
  }
  return n;
}

ScalarWithGrad ctc_loss(const Tensor& log_probs, std::span<const std::int32_t> labels) {
  if (log_probs.rank() != 2) throw DimensionError("ctc_loss: log_probs must be [T x (V+1)]");
  const std::size_t t_len = log_probs.rows();
  const std::size_t n_sym = log_probs.cols();
  if (n_sym < 2) throw DimensionError("ctc_loss: need at least one label symbol plus blank");
  const auto blank = static_cast<std::int32_t>(n_sym - 1);
  for (auto l : labels) {
    if (l < 0 || l >= blank) {
      throw LabelError("ctc_loss: label " + std::to_string(l) + " outside [0, " +
                       std::to_string(blank) + ")");
    }
  }
  if (t_len < ctc_min_frames(labels)) {
    throw InfeasibleAlignmentError("ctc_loss: " + std::to_string(labels.size()) +
                                   " labels need at least " +
                                   std::to_string(ctc_min_frames(labels)) + " frames, got " +
                                   std::to_string(t_len));
  }

  // Blank-interleaved sequence: b l0 b l1 ... b
  const std::size_t s_len = 2 * labels.size() + 1;
  std::vector<std::int32_t> ext(s_len, blank);
  for (std::size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  // alpha includes the emission at t; beta covers frames t+1.. only.
  std::vector<double> alpha(t_len * s_len, kNegInf);
  std::vector<double> beta(t_len * s_len, kNegInf);
  auto A = [&](std::size_t t, std::size_t s) -> double& { return alpha[t * s_len + s]; };
  auto B = [&](std::size_t t, std::size_t s) -> double& { return beta[t * s_len + s]; };
  auto lp = [&](std::size_t t, std::size_t s) { return log_probs.at(t, static_cast<std::size_t>(ext[s])); };

  A(0, 0) = lp(0, 0);
  if (s_len > 1) A(0, 1) = lp(0, 1);
  for (std::size_t t = 1; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = A(t - 1, s);
      if (s >= 1) acc = log_add(acc, A(t - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, A(t - 1, s - 2));
      if (acc != kNegInf) A(t, s) = acc + lp(t, s);
    }
  }
  double log_p = A(t_len - 1, s_len - 1);
  if (s_len > 1) log_p = log_add(log_p, A(t_len - 1, s_len - 2));

  B(t_len - 1, s_len - 1) = 0.0;
  if (s_len > 1) B(t_len - 1, s_len - 2) = 0.0;
  for (std::size_t t = t_len - 1; t-- > 0;) {
    for (std::size_t s = 0; s < s_len; ++s) {
      double acc = B(t + 1, s) + lp(t + 1, s);
      if (s + 1 < s_len) acc = log_add(acc, B(t + 1, s + 1) + lp(t + 1, s + 1));
      if (s + 2 < s_len && can_skip(s + 2)) acc = log_add(acc, B(t + 1, s + 2) + lp(t + 1, s + 2));
      B(t, s) = acc;
    }
  }

  ScalarWithGrad r;
  r.value = -log_p;
  r.grad = Tensor(log_probs.shape());
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t s = 0; s < s_len; ++s) {
      const double la = A(t, s) + B(t, s);
      if (la == kNegInf) continue;
      r.grad.at(t, static_cast<std::size_t>(ext[s])) -= std::exp(la - log_p);
    }
  }
  return r;
}

ScalarWithGrad ctc_loss_from_logits(const Tensor& logits, std::span<const std::int32_t> labels) {
  const Tensor lp = log_softmax_rows(logits);
  ScalarWithGrad r = ctc_loss(lp, labels);
  r.grad = log_softmax_rows_backward(lp, r.grad);
  return r;
}

std::vector<std::int32_t> ctc_greedy_decode(const Tensor& scores) {
  const auto blank = static_cast<std::int32_t>(scores.cols() - 1);
  std::vector<std::int32_t> out;
  std::int32_t prev = -1;
  for (std::size_t t = 0; t < scores.rows(); ++t) {
    const auto sym = static_cast<std::int32_t>(argmax(scores.row_span(t)));
    if (sym != blank && sym != prev) out.push_back(sym);
    prev = sym;
  }
  return out;
}

std::size_t edit_distance(std::span<const std::int32_t> a, std::span<const std::int32_t> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// ---- auxiliary router losses ------------------------------------------------------------

ScalarWithGrad sparsity_loss(const RouterBatch& batch) {
  if (batch.probs.rank() != 2) throw DimensionError("sparsity_loss: expected [k x n]");
  const std::size_t k = batch.frames();
  const std::size_t n = batch.experts();
  const double inv_k = 1.0 / static_cast<double>(k);
  ScalarWithGrad r;
  r.grad = Tensor(batch.probs.shape());
  for (std::size_t j = 0; j < k; ++j) {
    const double* p = batch.probs.row(j);
    double l1 = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      l1 += std::abs(p[i]);
      sq += p[i] * p[i];
    }
    if (sq == 0.0) {
      throw DegenerateDistributionError("sparsity_loss: frame " + std::to_string(j) +
                                        " has an all-zero probability row");
    }
    const double l2 = std::sqrt(sq);
    r.value += l1 / l2;
    // d(l1/l2)/dp_i = sign(p_i)/l2 - l1 p_i / l2^3
    double* g = r.grad.row(j);
    for (std::size_t i = 0; i < n; ++i) {
      const double sign = p[i] > 0.0 ? 1.0 : (p[i] < 0.0 ? -1.0 : 0.0);
      g[i] = inv_k * (sign / l2 - l1 * p[i] / (sq * l2));
    }
  }
  r.value *= inv_k;
  return r;
}

ScalarWithGrad mean_importance_loss(const RouterBatch& batch) {
  if (batch.probs.rank() != 2) throw DimensionError("mean_importance_loss: expected [k x n]");
  const std::size_t k = batch.frames();
  const std::size_t n = batch.experts();
  const double inv_k = 1.0 / static_cast<double>(k);
  std::vector<double> mean(n, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < n; ++i) mean[i] += batch.probs.at(j, i);
  }
  ScalarWithGrad r;
  for (auto& m : mean) {
    m *= inv_k;
    r.value += m * m;
  }
  r.value *= static_cast<double>(n);
  r.grad = Tensor(batch.probs.shape());
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < n; ++i) r.grad.at(j, i) = 2.0 * static_cast<double>(n) * mean[i] * inv_k;
  }
  return r;
}

// ---- classification ------------------------------------------------------------------------

ScalarWithGrad cross_entropy(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1) throw DimensionError("cross_entropy: logits must be rank 1");
  if (target >= logits.dim(0)) {
    throw LabelError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                     std::to_string(logits.dim(0)) + ")");
  }
  const Tensor lp = log_softmax(logits);
  ScalarWithGrad r;
  r.value = -lp[target];
  r.grad = Tensor(logits.shape());
  for (std::size_t i = 0; i < lp.size(); ++i) r.grad[i] = std::exp(lp[i]);
  r.grad[target] -= 1.0;
  return r;
}

// ---- combination ---------------------------------------------------------------------------

LossBreakdown combine(const LossBreakdown& parts, const LossWeights& w) {
  w.validate();
  const std::pair<const char*, double> named[] = {{"l_c", parts.l_c}, {"l_s", parts.l_s},
                                                  {"l_m", parts.l_m}, {"l_e", parts.l_e},
                                                  {"l_a", parts.l_a}, {"l_d", parts.l_d}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite loss term ") + name);
  }
  LossBreakdown out = parts;
  out.total = parts.l_c + w.alpha * parts.l_s + w.beta * parts.l_m + w.gamma * parts.l_e +
              w.eta * parts.l_a + w.theta * parts.l_d;
  return out;
}

}  // namespace speechmoe
