// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/embedding.hpp"

#include "speechmoe/errors.hpp"

namespace speechmoe {

EmbeddingNetwork EmbeddingNetwork::create(const EmbeddingDims& dims, Rng& rng) {
  EmbeddingNetwork net;
  net.input = Linear::create(dims.d_feat, dims.d_c, rng);
  for (std::size_t i = 0; i < dims.trunk_memory_layers; ++i) {
    net.trunk.push_back(MemoryLayer::create(dims.d_c, dims.memory_order, rng));
  }
  net.output = Linear::create(dims.d_c, dims.d_c, rng);
  net.grapheme_head = Linear::create(dims.d_c, dims.vocab + 1, rng);
  if (dims.accent_domain_heads) {
    if (dims.d_a == 0 || dims.d_d == 0) {
      throw ConfigError("accent/domain embedding dims must be positive (d_a, d_d)");
    }
    net.accent_proj = Tensor({dims.d_c, dims.d_a});
    net.domain_proj = Tensor({dims.d_c, dims.d_d});
    glorot_init(net.accent_proj, rng, dims.d_c, dims.d_a);
    glorot_init(net.domain_proj, rng, dims.d_c, dims.d_d);
    net.accent_cls = Linear::create(dims.d_a, dims.n_accents, rng);
    net.domain_cls = Linear::create(dims.d_d, dims.n_domains, rng);
  }
  return net;
}

EmbeddingNetwork EmbeddingNetwork::zeros_like() const {
  EmbeddingNetwork g;
  g.input = input.zeros_like();
  for (const auto& m : trunk) g.trunk.push_back(m.zeros_like());
  g.output = output.zeros_like();
  g.grapheme_head = grapheme_head.zeros_like();
  if (has_accent_domain()) {
    g.accent_proj = Tensor::zeros_like(accent_proj);
    g.domain_proj = Tensor::zeros_like(domain_proj);
    g.accent_cls = accent_cls.zeros_like();
    g.domain_cls = domain_cls.zeros_like();
  }
  return g;
}

void EmbeddingNetwork::visit(const std::string& prefix, const ParamVisitor& fn) {
  input.visit(prefix + ".input", fn);
  for (std::size_t i = 0; i < trunk.size(); ++i) trunk[i].visit(prefix + ".memory" + std::to_string(i), fn);
  output.visit(prefix + ".output", fn);
  grapheme_head.visit(prefix + ".grapheme_head", fn);
  if (has_accent_domain()) {
    fn(prefix + ".accent_proj", accent_proj);
    fn(prefix + ".domain_proj", domain_proj);
    accent_cls.visit(prefix + ".accent_cls", fn);
    domain_cls.visit(prefix + ".domain_cls", fn);
  }
}

EmbeddingOutputs embed(const EmbeddingNetwork& net, const Tensor& frames, EmbeddingCache* cache,
                       FlopCounter* flops, EmbedMode mode) {
  if (frames.is_null() || frames.rank() != 2) {
    throw EmptySequenceError("embed: expected a non-empty [T x d_feat] frame matrix");
  }
  constexpr auto kind = FlopKind::kEmbedding;
  EmbeddingCache local;
  EmbeddingCache& c = cache ? *cache : local;
  c.frames = frames;
  c.input_pre = linear_forward(net.input, frames, flops, kind);
  Tensor h = relu(c.input_pre);
  c.trunk_in.clear();
  for (const auto& m : net.trunk) {
    c.trunk_in.push_back(h);
    h = memory_forward(m, h, flops, kind);
  }
  c.trunk_out = h;
  EmbeddingOutputs& out = c.out;
  out = {};
  out.e_c = linear_forward(net.output, h, flops, kind);
  if (mode == EmbedMode::kTraining) {
    out.grapheme_logits = linear_forward(net.grapheme_head, out.e_c, flops, kind);
  }
  if (net.has_accent_domain()) {
    c.pooled = mean_over_time(out.e_c);
    out.e_a = matmul(c.pooled, net.accent_proj);
    out.e_d = matmul(c.pooled, net.domain_proj);
    count_macs(flops, kind, net.accent_proj.size() + net.domain_proj.size());
    if (mode == EmbedMode::kTraining) {
      out.accent_logits = linear_forward(net.accent_cls, out.e_a, flops, kind);
      out.domain_logits = linear_forward(net.domain_cls, out.e_d, flops, kind);
    }
  }
  c.valid = true;
  return out;
}

Tensor embed_backward(const EmbeddingNetwork& net, const EmbeddingCache& cache,
                      const EmbeddingOutputGrads& upstream, EmbeddingNetwork& grads) {
  if (!cache.valid) throw StateError("embed_backward called without a forward cache");
  const EmbeddingOutputs& out = cache.out;
  const std::size_t t_len = out.e_c.rows();

  Tensor g_ec = upstream.e_c.is_null() ? Tensor::zeros_like(out.e_c) : upstream.e_c;
  check_same_shape(g_ec, out.e_c, "embed_backward: e_c");
  if (!upstream.grapheme_logits.is_null()) {
    if (out.grapheme_logits.is_null()) throw StateError("grapheme head was not run in forward");
    add_inplace(g_ec, linear_backward(net.grapheme_head, out.e_c, upstream.grapheme_logits,
                                      grads.grapheme_head));
  }
  if (net.has_accent_domain()) {
    Tensor g_ea = upstream.e_a.is_null() ? Tensor::zeros_like(out.e_a) : upstream.e_a;
    Tensor g_ed = upstream.e_d.is_null() ? Tensor::zeros_like(out.e_d) : upstream.e_d;
    if (!upstream.accent_logits.is_null()) {
      add_inplace(g_ea, linear_backward(net.accent_cls, out.e_a, upstream.accent_logits, grads.accent_cls));
    }
    if (!upstream.domain_logits.is_null()) {
      add_inplace(g_ed, linear_backward(net.domain_cls, out.e_d, upstream.domain_logits, grads.domain_cls));
    }
    matmul_at_b_acc(cache.pooled, g_ea, grads.accent_proj);
    matmul_at_b_acc(cache.pooled, g_ed, grads.domain_proj);
    Tensor g_pooled = matmul_a_bt(g_ea, net.accent_proj);
    add_inplace(g_pooled, matmul_a_bt(g_ed, net.domain_proj));
    add_inplace(g_ec, mean_over_time_backward(g_pooled, t_len));
  } else if (!upstream.e_a.is_null() || !upstream.e_d.is_null()) {
    throw StateError("accent/domain gradient supplied to a network without those heads");
  }

  Tensor g = linear_backward(net.output, cache.trunk_out, g_ec, grads.output);
  for (std::size_t i = net.trunk.size(); i-- > 0;) {
    g = memory_backward(net.trunk[i], cache.trunk_in[i], g, grads.trunk[i]);
  }
  g = relu_backward(cache.input_pre, g);
  return linear_backward(net.input, cache.frames, g, grads.input);
}

}  // namespace speechmoe
