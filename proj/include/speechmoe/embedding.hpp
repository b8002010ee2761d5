// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "speechmoe/layers.hpp"

namespace speechmoe {

struct EmbeddingDims {
  std::size_t d_feat = 24;
  std::size_t d_c = 32;
  std::size_t d_a = 16;
  std::size_t d_d = 16;
  std::size_t vocab = 8;  // graphemes, blank excluded
  std::size_t n_accents = 4;
  std::size_t n_domains = 6;
  std::size_t trunk_memory_layers = 2;
  std::size_t memory_order = 2;
  // When false the accent/domain projections and classifiers are not built
  // (baseline routing without global embeddings).
  bool accent_domain_heads = true;
};

// Shared multi-task embedding network.
//   trunk: relu(x W_in + b) -> memory layers -> linear -> e_c
//   e_a = W_a . mean_t(e_c),  e_d = W_d . mean_t(e_c)
struct EmbeddingNetwork {
  Linear input;
  std::vector<MemoryLayer> trunk;
  Linear output;
  Linear grapheme_head;  // d_c -> vocab + 1
  Tensor accent_proj;    // W_a [d_c x d_a]
  Tensor domain_proj;    // W_d [d_c x d_d]
  Linear accent_cls;     // d_a -> n_accents
  Linear domain_cls;     // d_d -> n_domains

  static EmbeddingNetwork create(const EmbeddingDims& dims, Rng& rng);
  EmbeddingNetwork zeros_like() const;
  bool has_accent_domain() const { return !accent_proj.is_null(); }
  std::size_t d_c() const { return output.out_dim(); }
  void visit(const std::string& prefix, const ParamVisitor& fn);
};

struct EmbeddingOutputs {
  Tensor e_c;              // [T x d_c]
  Tensor e_a;              // [d_a] or null
  Tensor e_d;              // [d_d] or null
  Tensor grapheme_logits;  // [T x (V+1)], null in inference mode
  Tensor accent_logits;    // [n_accents] or null
  Tensor domain_logits;    // [n_domains] or null
};

// Same layout as EmbeddingOutputs; null members carry no gradient.
using EmbeddingOutputGrads = EmbeddingOutputs;

struct EmbeddingCache {
  bool valid = false;
  Tensor frames;
  Tensor input_pre;                // pre-relu input projection
  std::vector<Tensor> trunk_in;    // input to each memory layer
  Tensor trunk_out;                // input to `output`
  Tensor pooled;                   // mean_t(e_c)
  EmbeddingOutputs out;
};

enum class EmbedMode { kTraining, kInference };

// Inference mode skips the grapheme and classification heads (they are only
// needed for the training losses).
EmbeddingOutputs embed(const EmbeddingNetwork& net, const Tensor& frames,
                       EmbeddingCache* cache = nullptr, FlopCounter* flops = nullptr,
                       EmbedMode mode = EmbedMode::kTraining);

// Returns d/dframes and accumulates parameter gradients into `grads`.
Tensor embed_backward(const EmbeddingNetwork& net, const EmbeddingCache& cache,
                      const EmbeddingOutputGrads& upstream, EmbeddingNetwork& grads);

}  // namespace speechmoe
