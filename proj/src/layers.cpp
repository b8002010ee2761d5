// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/layers.hpp"

#include <algorithm>
#include <cmath>

#include "speechmoe/errors.hpp"
#include "speechmoe/kernels.hpp"

namespace speechmoe {

namespace {

Tensor at_b(const Tensor& a, const Tensor& g) {
  Tensor out({a.cols(), g.cols()});
  matmul_at_b_acc(a, g, out);
  return out;
}

void require_cols(const Tensor& t, std::size_t cols, const char* what) {
  if (t.rank() != 2 || t.cols() != cols) {
    throw DimensionError(std::string(what) + ": expected [* x " + std::to_string(cols) + "], got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

// ---- Linear --------------------------------------------------------------------

Linear Linear::create(std::size_t in, std::size_t out, Rng& rng) {
  Linear l{Tensor({in, out}), Tensor({out})};
  glorot_init(l.w, rng, in, out);
  return l;
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

Tensor linear_forward(const Linear& layer, const Tensor& x, FlopCounter* flops, FlopKind kind) {
  Tensor y = matmul(x, layer.w);
  add_bias_rows(y, layer.b);
  const std::size_t m = x.rank() == 1 ? 1 : x.rows();
  count_macs(flops, kind, m * layer.in_dim() * layer.out_dim());
  return y;
}

Tensor linear_backward(const Linear& layer, const Tensor& x, const Tensor& grad_out, Linear& grads) {
  matmul_at_b_acc(x, grad_out, grads.w);
  bias_grad_acc(grad_out, grads.b);
  return matmul_a_bt(grad_out, layer.w);
}

// ---- Expert --------------------------------------------------------------------

Expert Expert::create(std::size_t d_in, std::size_t d_h, std::size_t d_out, Rng& rng) {
  Expert e{Tensor({d_in, d_h}), Tensor({d_h}), Tensor({d_h, d_out}), Tensor({d_out})};
  glorot_init(e.w1, rng, d_in, d_h);
  glorot_init(e.w2, rng, d_h, d_out);
  return e;
}

Expert Expert::zeros_like() const {
  return {Tensor::zeros_like(w1), Tensor::zeros_like(b1), Tensor::zeros_like(w2),
          Tensor::zeros_like(b2)};
}

void Expert::validate() const {
  if (w1.rank() != 2 || w2.rank() != 2 || b1.rank() != 1 || b2.rank() != 1 ||
      b1.dim(0) != w1.cols() || w2.rows() != w1.cols() || b2.dim(0) != w2.cols()) {
    throw DimensionError("expert parameter shapes inconsistent: w1 " + shape_str(w1.shape()) +
                         " b1 " + shape_str(b1.shape()) + " w2 " + shape_str(w2.shape()) + " b2 " +
                         shape_str(b2.shape()));
  }
}

void Expert::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w1", w1);
  fn(prefix + ".b1", b1);
  fn(prefix + ".w2", w2);
  fn(prefix + ".b2", b2);
}

ExpertCache expert_forward(const Expert& expert, const Tensor& x, FlopCounter* flops) {
  require_cols(x, expert.in_dim(), "expert_forward");
  ExpertCache c;
  c.x = x;
  c.hidden = matmul(x, expert.w1);
  add_bias_rows(c.hidden, expert.b1);
  c.out = matmul(relu(c.hidden), expert.w2);
  add_bias_rows(c.out, expert.b2);
  if (flops) {
    flops->add_macs(FlopKind::kExpert, x.rows() * expert.macs_per_frame());
    flops->expert_evaluations += x.rows();
  }
  return c;
}

Tensor expert_backward(const Expert& expert, const ExpertCache& cache, const Tensor& grad_out,
                       Expert& grads) {
  check_same_shape(cache.out, grad_out, "expert_backward");
  const Tensor h = relu(cache.hidden);
  matmul_at_b_acc(h, grad_out, grads.w2);
  bias_grad_acc(grad_out, grads.b2);
  const Tensor g_h = relu_backward(cache.hidden, matmul_a_bt(grad_out, expert.w2));
  matmul_at_b_acc(cache.x, g_h, grads.w1);
  bias_grad_acc(g_h, grads.b1);
  return matmul_a_bt(g_h, expert.w1);
}

// ---- Router --------------------------------------------------------------------

Router Router::create(RouterVariant variant, std::size_t d_c, std::size_t d_a, std::size_t d_d,
                      std::size_t d_in, std::size_t n_experts, Rng& rng) {
  if (variant == RouterVariant::kBaseline) d_a = d_d = 0;
  Router r;
  r.variant = variant;
  r.d_c = d_c;
  r.d_a = d_a;
  r.d_d = d_d;
  r.d_in = d_in;
  r.weight = Tensor({d_c + d_a + d_d + d_in, n_experts});
  glorot_init(r.weight, rng, r.weight.rows(), n_experts);
  return r;
}

Router Router::zeros_like() const {
  Router r = *this;
  r.weight.fill(0.0);
  return r;
}

void Router::validate() const {
  if (variant == RouterVariant::kAugmented && (d_a == 0 || d_d == 0)) {
    throw ConfigError("augmented router requires positive accent and domain embedding dims");
  }
  if (variant == RouterVariant::kBaseline && (d_a != 0 || d_d != 0)) {
    throw ConfigError("baseline router must not consume accent/domain embeddings");
  }
  if (weight.rank() != 2 || weight.rows() != d_c + d_a + d_d + d_in) {
    throw DimensionError("router weight " + shape_str(weight.shape()) +
                         " does not match input dims d_c+d_a+d_d+d_in=" +
                         std::to_string(d_c + d_a + d_d + d_in));
  }
}

void Router::visit(const std::string& prefix, const ParamVisitor& fn) { fn(prefix + ".w", weight); }

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

namespace {

void check_embeddings(const Router& router, const Tensor& e_a, const Tensor& e_d) {
  const bool augmented = router.variant == RouterVariant::kAugmented;
  if (augmented && (e_a.is_null() || e_d.is_null())) {
    throw ConfigError("augmented router requires accent and domain embeddings");
  }
  if (!augmented && (!e_a.is_null() || !e_d.is_null())) {
    throw ConfigError("baseline router does not accept accent/domain embeddings");
  }
}

}  // namespace

RouterCache route_batch(const Router& router, const RouterEmbeddings& emb, const Tensor& o_prev,
                        FlopCounter* flops) {
  check_embeddings(router, emb.e_a, emb.e_d);
  require_cols(emb.e_c, router.d_c, "route: e_c");
  require_cols(o_prev, router.d_in, "route: o_prev");
  const std::size_t k = o_prev.rows();
  std::vector<Tensor> parts{emb.e_c};
  if (router.variant == RouterVariant::kAugmented) {
    require_cols(emb.e_a, router.d_a, "route: e_a");
    require_cols(emb.e_d, router.d_d, "route: e_d");
    parts.push_back(emb.e_a);
    parts.push_back(emb.e_d);
  }
  parts.push_back(o_prev);
  for (const auto& p : parts) {
    if (p.rows() != k) throw DimensionError("route: frame count mismatch among router inputs");
  }
  RouterCache c;
  c.input = concat(parts, 1);
  c.probs = softmax_rows(matmul(c.input, router.weight));
  const std::size_t n = router.n_experts();
  c.selected.resize(k);
  c.gate.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    c.selected[i] = argmax(c.probs.row_span(i));
    c.gate[i] = c.probs.at(i, c.selected[i]);
  }
  count_macs(flops, FlopKind::kRouter, k * router.route_dim() * n);
  count_transcendental(flops, FlopKind::kRouter, k * n);
  return c;
}

RouterDecision route(const Router& router, const Tensor& e_c, const Tensor& e_a, const Tensor& e_d,
                     const Tensor& o_prev) {
  check_embeddings(router, e_a, e_d);
  auto as_row = [](const Tensor& v) -> Tensor {
    if (v.is_null()) return {};
    if (v.rank() != 1) throw DimensionError("route: expected vector, got " + shape_str(v.shape()));
    return Tensor({1, v.dim(0)}, std::vector<double>(v.data().begin(), v.data().end()));
  };
  const RouterCache c = route_batch(router, {as_row(e_c), as_row(e_a), as_row(e_d)}, as_row(o_prev));
  return {c.probs.row_copy(0), c.selected[0], c.gate[0]};
}

RouterInputGrads router_backward(const Router& router, const RouterCache& cache,
                                 const Tensor& grad_probs, Router& grads) {
  const Tensor g_logits = softmax_rows_backward(cache.probs, grad_probs);
  matmul_at_b_acc(cache.input, g_logits, grads.weight);
  const Tensor g_in = matmul_a_bt(g_logits, router.weight);
  RouterInputGrads out;
  if (router.variant == RouterVariant::kAugmented) {
    const std::size_t sizes[] = {router.d_c, router.d_a, router.d_d, router.d_in};
    auto parts = split(g_in, 1, sizes);
    out.e_c = std::move(parts[0]);
    out.e_a = std::move(parts[1]);
    out.e_d = std::move(parts[2]);
    out.o_prev = std::move(parts[3]);
  } else {
    const std::size_t sizes[] = {router.d_c, router.d_in};
    auto parts = split(g_in, 1, sizes);
    out.e_c = std::move(parts[0]);
    out.o_prev = std::move(parts[1]);
  }
  return out;
}

// ---- MoE layer -----------------------------------------------------------------------

MoELayer MoELayer::create(std::size_t layer_index, std::size_t n_experts, RouterVariant variant,
                          std::size_t d_c, std::size_t d_a, std::size_t d_d, std::size_t d_model,
                          std::size_t d_hidden, Rng& rng) {
  if (n_experts == 0) throw ConfigError("MoE layer needs at least one expert");
  MoELayer l;
  l.layer_index = layer_index;
  l.router = Router::create(variant, d_c, d_a, d_d, d_model, n_experts, rng);
  for (std::size_t i = 0; i < n_experts; ++i) {
    l.experts.push_back(Expert::create(d_model, d_hidden, d_model, rng));
  }
  return l;
}

MoELayer MoELayer::zeros_like() const {
  MoELayer l;
  l.layer_index = layer_index;
  l.router = router.zeros_like();
  for (const auto& e : experts) l.experts.push_back(e.zeros_like());
  return l;
}

void MoELayer::validate() const {
  if (experts.empty()) throw ConfigError("MoE layer needs at least one expert");
  router.validate();
  if (router.n_experts() != experts.size()) {
    throw DimensionError("router has " + std::to_string(router.n_experts()) + " outputs for " +
                         std::to_string(experts.size()) + " experts");
  }
  for (const auto& e : experts) {
    e.validate();
    if (e.w1.shape() != experts[0].w1.shape() || e.w2.shape() != experts[0].w2.shape()) {
      throw DimensionError("experts in one layer must share shapes");
    }
  }
  if (experts[0].in_dim() != router.d_in) {
    throw DimensionError("expert input dim differs from router o_prev dim");
  }
}

void MoELayer::visit(const std::string& prefix, const ParamVisitor& fn) {
  router.visit(prefix + ".router", fn);
  for (std::size_t i = 0; i < experts.size(); ++i) {
    experts[i].visit(prefix + ".expert" + std::to_string(i), fn);
  }
}

std::vector<std::vector<std::size_t>> assign_frames(const std::vector<std::size_t>& selected,
                                                    std::size_t n_experts) {
  std::vector<std::vector<std::size_t>> groups(n_experts);
  for (std::size_t k = 0; k < selected.size(); ++k) groups.at(selected[k]).push_back(k);
  return groups;
}

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const std::size_t n = m.cols();
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(m.row(rows[i]), m.row(rows[i]) + n, out.row(i));
  }
  return out;
}

MoEOutput moe_forward(const MoELayer& layer, const Tensor& frame_inputs,
                      const RouterEmbeddings& emb, FlopCounter* flops) {
  layer.validate();
  MoEOutput out;
  MoECache& c = out.cache;
  c.router = route_batch(layer.router, emb, frame_inputs, flops);
  const std::size_t k = frame_inputs.rows();
  const std::size_t d_out = layer.experts[0].out_dim();
  c.assignment = assign_frames(c.router.selected, layer.n_experts());
  c.expert_caches.resize(layer.n_experts());
  c.expert_out = Tensor({k, d_out});
  out.y = Tensor({k, d_out});
  for (std::size_t e = 0; e < layer.n_experts(); ++e) {
    const auto& rows = c.assignment[e];
    if (rows.empty()) continue;
    c.expert_caches[e] = expert_forward(layer.experts[e], gather_rows(frame_inputs, rows), flops);
    const Tensor& eo = c.expert_caches[e].out;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double gate = c.router.gate[rows[i]];
      double* dst_raw = c.expert_out.row(rows[i]);
      double* dst = out.y.row(rows[i]);
      for (std::size_t j = 0; j < d_out; ++j) {
        dst_raw[j] = eo.at(i, j);
        dst[j] = gate * eo.at(i, j);
      }
    }
  }
  out.decisions.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    out.decisions.push_back({c.router.probs.row_copy(i), c.router.selected[i], c.router.gate[i]});
  }
  c.valid = true;
  return out;
}

std::vector<double> gate_grads(const Tensor& grad_out, const Tensor& expert_out) {
  check_same_shape(grad_out, expert_out, "gate_grads");
  std::vector<double> g(grad_out.rows());
  for (std::size_t k = 0; k < g.size(); ++k) {
    g[k] = kernels::dot(grad_out.row(k), expert_out.row(k), grad_out.cols());
  }
  return g;
}

Tensor router_prob_grads(const RouterCache& cache, const std::vector<double>& g_gate,
                         const Tensor& grad_probs_aux) {
  Tensor g = grad_probs_aux.is_null() ? Tensor::zeros_like(cache.probs) : grad_probs_aux;
  check_same_shape(g, cache.probs, "router_prob_grads");
  for (std::size_t k = 0; k < g_gate.size(); ++k) g.at(k, cache.selected[k]) += g_gate[k];
  return g;
}

MoEBackwardResult moe_backward(const MoELayer& layer, const MoECache& cache, const Tensor& grad_out,
                               const Tensor& grad_probs, MoELayer& grads) {
  if (!cache.valid) throw StateError("moe_backward called without a forward cache");
  check_same_shape(grad_out, cache.expert_out, "moe_backward");
  const std::size_t k = grad_out.rows();
  const std::size_t d_out = grad_out.cols();
  const std::size_t d_in = layer.router.d_in;

  MoEBackwardResult res;
  res.grad_input = Tensor({k, d_in});
  for (std::size_t e = 0; e < layer.n_experts(); ++e) {
    const auto& rows = cache.assignment[e];
    if (rows.empty()) continue;
    Tensor g_e({rows.size(), d_out});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double gate = cache.router.gate[rows[i]];
      const double* src = grad_out.row(rows[i]);
      double* dst = g_e.row(i);
      for (std::size_t j = 0; j < d_out; ++j) dst[j] = gate * src[j];
    }
    const Tensor g_x = expert_backward(layer.experts[e], cache.expert_caches[e], g_e, grads.experts[e]);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy(g_x.row(i), g_x.row(i) + d_in, res.grad_input.row(rows[i]));
    }
  }
  const Tensor g_probs =
      router_prob_grads(cache.router, gate_grads(grad_out, cache.expert_out), grad_probs);
  res.router_input = router_backward(layer.router, cache.router, g_probs, grads.router);
  add_inplace(res.grad_input, res.router_input.o_prev);
  return res;
}

// ---- Memory layer ----------------------------------------------------------------------

MemoryLayer MemoryLayer::create(std::size_t d, std::size_t order, Rng& rng) {
  MemoryLayer m{Tensor({2 * order + 1, d}), order};
  const double a = 1.0 / static_cast<double>(2 * order + 1);
  for (double& v : m.taps.data()) v = uniform(rng, -a, a);
  return m;
}

void MemoryLayer::visit(const std::string& prefix, const ParamVisitor& fn) { fn(prefix + ".taps", taps); }

Tensor memory_forward(const MemoryLayer& layer, const Tensor& seq, FlopCounter* flops, FlopKind kind) {
  require_cols(seq, layer.dim(), "memory_forward");
  const std::size_t t_len = seq.rows();
  const std::size_t d = layer.dim();
  const auto order = static_cast<std::ptrdiff_t>(layer.order);
  Tensor out = seq;
  std::uint64_t macs = 0;
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::ptrdiff_t tau = -order; tau <= order; ++tau) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + tau;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
      kernels::hadamard_acc(layer.taps.row(static_cast<std::size_t>(tau + order)),
                            seq.row(static_cast<std::size_t>(src)), out.row(t), d);
      macs += d;
    }
  }
  count_macs(flops, kind, macs);
  return out;
}

Tensor memory_backward(const MemoryLayer& layer, const Tensor& seq, const Tensor& grad_out,
                       MemoryLayer& grads) {
  check_same_shape(seq, grad_out, "memory_backward");
  const std::size_t t_len = seq.rows();
  const std::size_t d = layer.dim();
  const auto order = static_cast<std::ptrdiff_t>(layer.order);
  Tensor g_in = grad_out;
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::ptrdiff_t tau = -order; tau <= order; ++tau) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + tau;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(t_len)) continue;
      const auto tap = static_cast<std::size_t>(tau + order);
      const auto s = static_cast<std::size_t>(src);
      kernels::hadamard_acc(grad_out.row(t), seq.row(s), grads.taps.row(tap), d);
      kernels::hadamard_acc(layer.taps.row(tap), grad_out.row(t), g_in.row(s), d);
    }
  }
  return g_in;
}

// ---- Attention -------------------------------------------------------------------------

AttentionLayer AttentionLayer::create(std::size_t d, std::size_t d_att, Rng& rng) {
  AttentionLayer a{Tensor({d, d_att}), Tensor({d, d_att}), Tensor({d, d_att}), Tensor({d_att, d})};
  glorot_init(a.wq, rng, d, d_att);
  glorot_init(a.wk, rng, d, d_att);
  glorot_init(a.wv, rng, d, d_att);
  glorot_init(a.wo, rng, d_att, d);
  return a;
}

AttentionLayer AttentionLayer::zeros_like() const {
  return {Tensor::zeros_like(wq), Tensor::zeros_like(wk), Tensor::zeros_like(wv),
          Tensor::zeros_like(wo)};
}

void AttentionLayer::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".wq", wq);
  fn(prefix + ".wk", wk);
  fn(prefix + ".wv", wv);
  fn(prefix + ".wo", wo);
}

Tensor attention_forward(const AttentionLayer& layer, const Tensor& seq, AttentionCache* cache,
                         FlopCounter* flops) {
  require_cols(seq, layer.dim(), "attention_forward");
  const std::size_t t_len = seq.rows();
  const std::size_t d = layer.dim();
  const std::size_t d_att = layer.att_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_att));

  Tensor q = matmul(seq, layer.wq);
  Tensor k = matmul(seq, layer.wk);
  Tensor v = matmul(seq, layer.wv);
  Tensor scores = matmul_a_bt(q, k);
  for (auto& s : scores.data()) s *= inv_sqrt;
  Tensor weights = softmax_rows(scores);
  Tensor context = matmul(weights, v);
  Tensor out = matmul(context, layer.wo);
  add_inplace(out, seq);

  if (flops) {
    flops->add_macs(FlopKind::kBackbone,
                    3 * t_len * d * d_att + 2 * t_len * t_len * d_att + t_len * d_att * d);
    flops->add(FlopKind::kBackbone, t_len * t_len);
  }
  if (cache) {
    *cache = {true, seq, std::move(q), std::move(k), std::move(v), std::move(weights),
              std::move(context)};
  }
  return out;
}

Tensor attention_backward(const AttentionLayer& layer, const AttentionCache& cache,
                          const Tensor& grad_out, AttentionLayer& grads) {
  if (!cache.valid) throw StateError("attention_backward called without a forward cache");
  check_same_shape(cache.x, grad_out, "attention_backward");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(layer.att_dim()));

  matmul_at_b_acc(cache.context, grad_out, grads.wo);
  const Tensor g_ctx = matmul_a_bt(grad_out, layer.wo);
  const Tensor g_w = matmul_a_bt(g_ctx, cache.v);
  const Tensor g_v = at_b(cache.weights, g_ctx);
  Tensor g_s = softmax_rows_backward(cache.weights, g_w);
  for (auto& s : g_s.data()) s *= inv_sqrt;
  const Tensor g_q = matmul(g_s, cache.k);
  const Tensor g_k = at_b(g_s, cache.q);

  matmul_at_b_acc(cache.x, g_q, grads.wq);
  matmul_at_b_acc(cache.x, g_k, grads.wk);
  matmul_at_b_acc(cache.x, g_v, grads.wv);

  Tensor g_x = grad_out;
  add_inplace(g_x, matmul_a_bt(g_q, layer.wq));
  add_inplace(g_x, matmul_a_bt(g_k, layer.wk));
  add_inplace(g_x, matmul_a_bt(g_v, layer.wv));
  return g_x;
}

}  // namespace speechmoe
