// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "speechmoe/flops.hpp"
#include "speechmoe/rng.hpp"
#include "speechmoe/tensor.hpp"

namespace speechmoe {

// Parameter visitor used for SGD, gradient reduction, and checkpoints.
using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

// y = x W + b
struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]

  static Linear create(std::size_t in, std::size_t out, Rng& rng);
  Linear zeros_like() const { return {Tensor::zeros_like(w), Tensor::zeros_like(b)}; }
  std::size_t in_dim() const { return w.rows(); }
  std::size_t out_dim() const { return w.cols(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

Tensor linear_forward(const Linear& layer, const Tensor& x, FlopCounter* flops = nullptr,
                      FlopKind kind = FlopKind::kBackbone);
// Accumulates parameter gradients into `grads`; returns d/dx.
Tensor linear_backward(const Linear& layer, const Tensor& x, const Tensor& grad_out, Linear& grads);

// ---------------------------------------------------------------------------
// Expert FFN: relu(x W1 + b1) W2 + b2
struct Expert {
  Tensor w1;  // [d_in x d_h]
  Tensor b1;  // [d_h]
  Tensor w2;  // [d_h x d_out]
  Tensor b2;  // [d_out]

  static Expert create(std::size_t d_in, std::size_t d_h, std::size_t d_out, Rng& rng);
  Expert zeros_like() const;
  void validate() const;
  std::size_t in_dim() const { return w1.rows(); }
  std::size_t hidden_dim() const { return w1.cols(); }
  std::size_t out_dim() const { return w2.cols(); }
  std::size_t macs_per_frame() const { return in_dim() * hidden_dim() + hidden_dim() * out_dim(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct ExpertCache {
  Tensor x;       // [m x d_in]
  Tensor hidden;  // pre-activation [m x d_h]
  Tensor out;     // [m x d_out]
};

ExpertCache expert_forward(const Expert& expert, const Tensor& x, FlopCounter* flops = nullptr);
Tensor expert_backward(const Expert& expert, const ExpertCache& cache, const Tensor& grad_out,
                       Expert& grads);

// ---------------------------------------------------------------------------
enum class RouterVariant { kBaseline, kAugmented };

// Per-frame router embeddings, one row per frame. Utterance-level accent and
// domain embeddings are repeated on every frame of their utterance. e_a and
// e_d are null for the baseline variant.
struct RouterEmbeddings {
  Tensor e_c;  // [K x d_c]
  Tensor e_a;  // [K x d_a] or null
  Tensor e_d;  // [K x d_d] or null
};

struct Router {
  Tensor weight;  // [(d_c [+ d_a + d_d] + d_in) x n_experts]
  RouterVariant variant = RouterVariant::kBaseline;
  std::size_t d_c = 0, d_a = 0, d_d = 0, d_in = 0;

  static Router create(RouterVariant variant, std::size_t d_c, std::size_t d_a, std::size_t d_d,
                       std::size_t d_in, std::size_t n_experts, Rng& rng);
  Router zeros_like() const;
  std::size_t route_dim() const { return weight.rows(); }
  std::size_t n_experts() const { return weight.cols(); }
  void validate() const;
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct RouterDecision {
  Tensor probs;  // [n]
  std::size_t selected = 0;
  double gate = 0.0;
};

struct RouterCache {
  Tensor input;   // [K x d_route]
  Tensor probs;   // [K x n]
  std::vector<std::size_t> selected;
  std::vector<double> gate;
};

struct RouterInputGrads {
  Tensor e_c;     // [K x d_c]
  Tensor e_a;     // [K x d_a] or null
  Tensor e_d;     // [K x d_d] or null
  Tensor o_prev;  // [K x d_in]
};

// argmax with lowest-index tie-break.
std::size_t argmax(std::span<const double> values);

// Single-frame routing. e_a / e_d must be null (rank 0) for the baseline
// variant and present for the augmented one.
RouterDecision route(const Router& router, const Tensor& e_c, const Tensor& e_a, const Tensor& e_d,
                     const Tensor& o_prev);
RouterCache route_batch(const Router& router, const RouterEmbeddings& emb, const Tensor& o_prev,
                        FlopCounter* flops = nullptr);
// grad_probs: dL/dprobs [K x n] (gate path plus auxiliary losses).
RouterInputGrads router_backward(const Router& router, const RouterCache& cache,
                                 const Tensor& grad_probs, Router& grads);

// ---------------------------------------------------------------------------
struct MoELayer {
  std::vector<Expert> experts;
  Router router;
  std::size_t layer_index = 0;

  static MoELayer create(std::size_t layer_index, std::size_t n_experts, RouterVariant variant,
                         std::size_t d_c, std::size_t d_a, std::size_t d_d, std::size_t d_model,
                         std::size_t d_hidden, Rng& rng);
  MoELayer zeros_like() const;
  void validate() const;
  std::size_t n_experts() const { return experts.size(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct MoECache {
  bool valid = false;
  RouterCache router;
  // Frame indices per expert, ascending.
  std::vector<std::vector<std::size_t>> assignment;
  std::vector<ExpertCache> expert_caches;
  Tensor expert_out;  // ungated selected-expert output [K x d_out]
};

struct MoEOutput {
  Tensor y;  // [K x d_out]
  std::vector<RouterDecision> decisions;
  MoECache cache;
};

// Groups frame indices by selected expert, preserving frame order.
std::vector<std::vector<std::size_t>> assign_frames(const std::vector<std::size_t>& selected,
                                                    std::size_t n_experts);
Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows);

MoEOutput moe_forward(const MoELayer& layer, const Tensor& frame_inputs, const RouterEmbeddings& emb,
                      FlopCounter* flops = nullptr);

struct MoEBackwardResult {
  Tensor grad_input;             // [K x d_in]
  RouterInputGrads router_input;  // includes o_prev part already folded into grad_input
};

// grad_probs may be null when no auxiliary-loss gradient flows into the router.
MoEBackwardResult moe_backward(const MoELayer& layer, const MoECache& cache, const Tensor& grad_out,
                               const Tensor& grad_probs, MoELayer& grads);

// dL/dgate for every frame: <grad_out[k], expert_out[k]>.
std::vector<double> gate_grads(const Tensor& grad_out, const Tensor& expert_out);
// Router-probability gradient: aux part (may be null) plus the gate path.
Tensor router_prob_grads(const RouterCache& cache, const std::vector<double>& g_gate,
                         const Tensor& grad_probs_aux);

// ---------------------------------------------------------------------------
// Bidirectional tap-delay block with residual:
//   out[t] = in[t] + sum_{tau=-order..order} taps[tau + order] (.) in[t + tau]
struct MemoryLayer {
  Tensor taps;  // [(2 order + 1) x d]
  std::size_t order = 0;

  static MemoryLayer create(std::size_t d, std::size_t order, Rng& rng);
  MemoryLayer zeros_like() const { return {Tensor::zeros_like(taps), order}; }
  std::size_t dim() const { return taps.cols(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

Tensor memory_forward(const MemoryLayer& layer, const Tensor& seq, FlopCounter* flops = nullptr,
                      FlopKind kind = FlopKind::kBackbone);
Tensor memory_backward(const MemoryLayer& layer, const Tensor& seq, const Tensor& grad_out,
                       MemoryLayer& grads);

// ---------------------------------------------------------------------------
// Single-head scaled dot-product self-attention with residual.
struct AttentionLayer {
  Tensor wq, wk, wv;  // [d x d_att]
  Tensor wo;          // [d_att x d]

  static AttentionLayer create(std::size_t d, std::size_t d_att, Rng& rng);
  AttentionLayer zeros_like() const;
  std::size_t dim() const { return wq.rows(); }
  std::size_t att_dim() const { return wq.cols(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct AttentionCache {
  bool valid = false;
  Tensor x, q, k, v, weights, context;
};

Tensor attention_forward(const AttentionLayer& layer, const Tensor& seq,
                         AttentionCache* cache = nullptr, FlopCounter* flops = nullptr);
Tensor attention_backward(const AttentionLayer& layer, const AttentionCache& cache,
                          const Tensor& grad_out, AttentionLayer& grads);

}  // namespace speechmoe
