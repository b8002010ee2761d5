// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "speechmoe/data.hpp"
#include "speechmoe/embedding.hpp"
#include "speechmoe/layers.hpp"
#include "speechmoe/losses.hpp"

namespace speechmoe {

enum class AuxLossScope { kGlobal, kPerWorker };

struct ModelConfig {
  // architecture
  std::size_t n_moe_layers = 6;
  std::size_t n_memory_layers = 6;
  std::size_t attention_every = 3;
  std::size_t n_experts = 2;
  std::size_t d_model = 32;
  std::size_t expert_hidden = 64;
  std::size_t d_att = 32;
  std::size_t memory_order = 2;
  std::size_t embed_memory_layers = 2;
  std::size_t d_c = 32;
  std::size_t d_a = 16;
  std::size_t d_d = 16;
  RouterVariant router = RouterVariant::kAugmented;
  bool moe_residual = true;
  // data shape
  std::size_t vocab = 8;
  std::size_t d_feat = 24;
  std::size_t n_domains = 6;
  std::size_t n_accents = 4;
  // objective
  LossWeights weights;
  bool detach_embeddings = false;
  AuxLossScope aux_scope = AuxLossScope::kGlobal;
  // execution
  std::size_t n_workers = 1;
  std::uint64_t seed = 1;
  double learning_rate = 0.02;
  double max_grad_norm = 5.0;  // global L2 clip before SGD, 0 disables
  std::size_t batch_size = 16;
  std::size_t steps = 300;
  std::size_t frames_per_second = 33;  // 30 ms frame rate

  bool augmented() const { return router == RouterVariant::kAugmented; }
  std::size_t route_dim() const { return d_c + (augmented() ? d_a + d_d : 0) + d_model; }
  // Throws ConfigError naming the offending key.
  void validate() const;
  // moe1: routers see only e_c; accent/domain heads and their losses are off.
  LossWeights effective_weights() const;
};

// Layer stack: input projection, then n_moe_layers blocks of
//   z = o + MoE(o) (residual optional), o = Memory(z)
// with an attention layer after every `attention_every` blocks, then an
// output projection to vocab + 1 CTC logits.
struct Model {
  ModelConfig config;
  EmbeddingNetwork embedding;
  Linear input;
  std::vector<MoELayer> moe;
  std::vector<MemoryLayer> memory;
  std::vector<AttentionLayer> attention;
  Linear output;

  Model zeros_like() const;
  void visit(const ParamVisitor& fn);
  void visit(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  // Index of the attention layer following block `block`, or -1.
  int attention_after(std::size_t block) const;
};

Model build_model(const ModelConfig& config);

struct ParamCounts {
  std::size_t total = 0;
  std::size_t expert = 0;
  std::size_t router = 0;
  std::size_t embedding = 0;
  std::size_t other = 0;
};
ParamCounts count_params(const Model& model);

struct FlopBreakdown {
  std::uint64_t expert = 0;
  std::uint64_t router = 0;
  std::uint64_t embedding = 0;
  std::uint64_t backbone = 0;
  std::uint64_t total() const { return expert + router + embedding + backbone; }
};
// Analytic inference FLOPs for a one-second input (frames_per_second frames).
FlopBreakdown count_flops(const ModelConfig& config);
FlopBreakdown to_breakdown(const FlopCounter& counter);

// ---------------------------------------------------------------------------
// Batch-level forward/backward, split into phases so the MoE layers can be
// executed either locally or through the expert-parallel simulator.

struct BatchCache {
  std::vector<const Utterance*> utts;
  std::vector<std::size_t> offsets;  // frame offsets, size utts+1
  std::vector<EmbeddingCache> emb;
  RouterEmbeddings router_emb;  // per-frame rows
  Tensor frames;                // [K x d_feat]
  Tensor input_pre;             // [K x d_model]
  std::vector<Tensor> moe_in;   // per block [K x d]
  std::vector<Tensor> moe_out;  // per block, gated MoE output
  std::vector<MoECache> moe_cache;      // local execution only
  std::vector<Tensor> mem_in;           // per block
  std::vector<Tensor> att_in;           // per block (null if no attention)
  std::vector<std::vector<AttentionCache>> att_cache;
  Tensor final_out;
  Tensor logits;
  // router outputs per block (filled by the executor)
  std::vector<RouterCache> router;
  std::vector<Tensor> expert_out;  // ungated selected-expert output per block

  std::size_t frames_total() const { return offsets.back(); }
  std::size_t num_utts() const { return utts.size(); }
};

struct TaskLossGrads {
  double ctc_sum = 0, emb_ctc_sum = 0, accent_sum = 0, domain_sum = 0;
  Tensor g_logits;                                // [K x (V+1)], already scaled
  std::vector<EmbeddingOutputGrads> emb_grads;    // per utterance head grads
};

void forward_begin(const Model& model, BatchCache& cache, FlopCounter* flops, EmbedMode mode);
void forward_block_end(const Model& model, BatchCache& cache, std::size_t block, Tensor moe_y,
                       FlopCounter* flops);
void forward_end(const Model& model, BatchCache& cache, FlopCounter* flops);
BatchCache make_batch_cache(std::span<const Utterance* const> utts, std::size_t n_blocks);

// Per-utterance task losses; gradients are scaled by 1/global_batch and the
// loss weights.
TaskLossGrads task_losses(const Model& model, const BatchCache& cache, std::size_t global_batch,
                          const LossWeights& w);

struct BackwardState {
  Tensor g;                          // gradient w.r.t. current block output
  Tensor g_e_c;                      // router-consumer grads [K x d_c]
  Tensor g_e_a_rows, g_e_d_rows;     // [K x d_a], [K x d_d] or null
  std::vector<Tensor> g_after_block; // scratch: grad w.r.t. z for residual
};

BackwardState backward_begin(const Model& model, const BatchCache& cache, const Tensor& g_logits,
                             Model& grads);
// Returns dL/d(moe_y) for `block`, consuming attention and memory.
Tensor backward_block_pre(const Model& model, const BatchCache& cache, std::size_t block,
                          BackwardState& st, Model& grads);
// Folds the MoE layer's input gradient and router embedding grads.
void backward_block_finish(const Model& model, std::size_t block, BackwardState& st,
                           const Tensor& g_moe_input, const RouterInputGrads& router_grads);
void backward_end(const Model& model, const BatchCache& cache, BackwardState& st,
                  const TaskLossGrads& task, Model& grads);

// ---------------------------------------------------------------------------
struct StepResult {
  Model grads;
  LossBreakdown loss;
  // Global router outputs per MoE layer, frames in batch order.
  std::vector<RouterBatch> probs;
  std::vector<std::vector<std::size_t>> selected;
};

// Aux (L_s, L_m) values and gradients for one layer's global probabilities,
// averaged over layers: returns grad already multiplied by weight / n_layers.
struct AuxTerms {
  double l_s = 0, l_m = 0;
  Tensor grad;
};
AuxTerms aux_losses(const RouterBatch& batch, const LossWeights& w, std::size_t n_layers);

// Single-process reference step: forward + backward over `batch` using the
// MoE layer's own forward/backward.
StepResult train_step_local(const Model& model, std::span<const Utterance> batch);

// Inference: CTC logits for one utterance.
Tensor infer(const Model& model, const Utterance& utt, FlopCounter* flops = nullptr,
             std::vector<std::vector<std::size_t>>* selected = nullptr);

void sgd_update(Model& model, const Model& grads, double lr);

}  // namespace speechmoe
