// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/model.hpp"

#include <cmath>

#include "speechmoe/errors.hpp"

namespace speechmoe {

// ---- config ------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto require = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(std::string(key) + ": " + msg);
  };
  require(n_moe_layers >= 1, "n_moe_layers", "must be >= 1");
  require(n_memory_layers == n_moe_layers, "n_memory_layers",
          "must equal n_moe_layers (each MoE layer is followed by one memory layer)");
  require(n_experts >= 1, "n_experts", "must be >= 1");
  require(d_model >= 1, "d_model", "must be >= 1");
  require(expert_hidden >= 1, "expert_hidden", "must be >= 1");
  require(d_att >= 1, "d_att", "must be >= 1");
  require(d_c >= 1, "d_c", "must be >= 1");
  require(vocab >= 1, "vocab", "must be >= 1");
  require(d_feat >= 1, "d_feat", "must be >= 1");
  require(n_domains >= 1, "n_domains", "must be >= 1");
  require(n_accents >= 1, "n_accents", "must be >= 1");
  if (augmented()) {
    require(d_a >= 1, "d_a", "moe2 requires a positive accent embedding dim");
    require(d_d >= 1, "d_d", "moe2 requires a positive domain embedding dim");
  }
  require(n_workers >= 1, "n_workers", "must be >= 1");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(std::isfinite(learning_rate) && learning_rate >= 0.0, "learning_rate", "must be finite and >= 0");
  require(std::isfinite(max_grad_norm) && max_grad_norm >= 0.0, "max_grad_norm", "must be finite and >= 0");
  require(frames_per_second >= 1, "frames_per_second", "must be >= 1");
  weights.validate();
}

LossWeights ModelConfig::effective_weights() const {
  LossWeights w = weights;
  if (!augmented()) w.eta = w.theta = 0.0;
  return w;
}

// ---- model ---------------------------------------------------------------------------

Model build_model(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  Model m;
  m.config = config;
  EmbeddingDims ed;
  ed.d_feat = config.d_feat;
  ed.d_c = config.d_c;
  ed.d_a = config.d_a;
  ed.d_d = config.d_d;
  ed.vocab = config.vocab;
  ed.n_accents = config.n_accents;
  ed.n_domains = config.n_domains;
  ed.trunk_memory_layers = config.embed_memory_layers;
  ed.memory_order = config.memory_order;
  ed.accent_domain_heads = config.augmented();
  m.embedding = EmbeddingNetwork::create(ed, rng);
  m.input = Linear::create(config.d_feat, config.d_model, rng);
  for (std::size_t l = 0; l < config.n_moe_layers; ++l) {
    m.moe.push_back(MoELayer::create(l, config.n_experts, config.router, config.d_c, config.d_a,
                                     config.d_d, config.d_model, config.expert_hidden, rng));
    m.memory.push_back(MemoryLayer::create(config.d_model, config.memory_order, rng));
    if (m.attention_after(l) >= 0) m.attention.push_back(AttentionLayer::create(config.d_model, config.d_att, rng));
  }
  m.output = Linear::create(config.d_model, config.vocab + 1, rng);
  m.output.w.fill(0.0);  // untrained model emits uniform CTC posteriors
  return m;
}

int Model::attention_after(std::size_t block) const {
  if (config.attention_every == 0) return -1;
  if ((block + 1) % config.attention_every != 0) return -1;
  return static_cast<int>((block + 1) / config.attention_every - 1);
}

Model Model::zeros_like() const {
  Model g;
  g.config = config;
  g.embedding = embedding.zeros_like();
  g.input = input.zeros_like();
  for (const auto& l : moe) g.moe.push_back(l.zeros_like());
  for (const auto& l : memory) g.memory.push_back(l.zeros_like());
  for (const auto& l : attention) g.attention.push_back(l.zeros_like());
  g.output = output.zeros_like();
  return g;
}

void Model::visit(const ParamVisitor& fn) {
  embedding.visit("embedding", fn);
  input.visit("input", fn);
  for (std::size_t l = 0; l < moe.size(); ++l) {
    moe[l].visit("moe" + std::to_string(l), fn);
    memory[l].visit("memory" + std::to_string(l), fn);
    const int a = attention_after(l);
    if (a >= 0) attention[static_cast<std::size_t>(a)].visit("attention" + std::to_string(a), fn);
  }
  output.visit("output", fn);
}

void Model::visit(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<Model*>(this)->visit(ParamVisitor([&](const std::string& n, Tensor& t) { fn(n, t); }));
}

ParamCounts count_params(const Model& model) {
  ParamCounts c;
  model.visit([&](const std::string& name, const Tensor& t) {
    c.total += t.size();
    if (name.find(".expert") != std::string::npos) {
      c.expert += t.size();
    } else if (name.find(".router") != std::string::npos) {
      c.router += t.size();
    } else if (name.rfind("embedding", 0) == 0) {
      c.embedding += t.size();
    } else {
      c.other += t.size();
    }
  });
  return c;
}

void sgd_update(Model& model, const Model& grads, double lr) {
  std::vector<const Tensor*> g;
  grads.visit([&](const std::string&, const Tensor& t) { g.push_back(&t); });
  std::size_t i = 0;
  model.visit(ParamVisitor([&](const std::string& name, Tensor& p) {
    check_same_shape(p, *g.at(i), name.c_str());
    axpy_inplace(p, -lr, *g[i]);
    ++i;
  }));
}

// ---- FLOPs ---------------------------------------------------------------------------

namespace {

std::uint64_t memory_macs(std::size_t t_len, std::size_t order, std::size_t d) {
  std::uint64_t pairs = 0;
  for (std::size_t tau = 0; tau <= order; ++tau) {
    if (tau >= t_len) break;
    pairs += (tau == 0 ? 1 : 2) * (t_len - tau);
  }
  return pairs * d;
}

}  // namespace

FlopBreakdown count_flops(const ModelConfig& c) {
  FlopBreakdown f;
  if (c.n_moe_layers == 0) return f;
  const std::uint64_t t = c.frames_per_second;
  // embedding network (inference: no grapheme/classification heads)
  std::uint64_t emb = t * c.d_feat * c.d_c + t * c.d_c * c.d_c;
  emb += c.embed_memory_layers * memory_macs(t, c.memory_order, c.d_c);
  if (c.augmented()) emb += c.d_c * c.d_a + c.d_c * c.d_d;
  f.embedding = 2 * emb;

  const std::uint64_t layers = c.n_moe_layers;
  const std::uint64_t n = c.n_experts;
  f.expert = 2 * layers * t * (c.d_model * c.expert_hidden + c.expert_hidden * c.d_model);
  f.router = layers * (2 * t * c.route_dim() * n + t * n);

  std::uint64_t bb = t * c.d_feat * c.d_model + t * c.d_model * (c.vocab + 1);
  bb += layers * memory_macs(t, c.memory_order, c.d_model);
  const std::uint64_t n_att = c.attention_every ? c.n_moe_layers / c.attention_every : 0;
  const std::uint64_t att_macs = 3 * t * c.d_model * c.d_att + 2 * t * t * c.d_att + t * c.d_att * c.d_model;
  f.backbone = 2 * bb + n_att * (2 * att_macs + t * t);
  return f;
}

FlopBreakdown to_breakdown(const FlopCounter& counter) {
  return {counter.get(FlopKind::kExpert), counter.get(FlopKind::kRouter),
          counter.get(FlopKind::kEmbedding), counter.get(FlopKind::kBackbone)};
}

// ---- batch phases ----------------------------------------------------------------------

namespace {

Tensor rows_of(const Tensor& m, std::size_t begin, std::size_t end) { return slice_rows(m, begin, end); }

void put_rows(Tensor& dst, std::size_t begin, const Tensor& src) {
  std::copy(src.data().begin(), src.data().end(), dst.row(begin));
}

Tensor repeat_rows(const std::vector<Tensor>& per_utt, const std::vector<std::size_t>& offsets) {
  const std::size_t d = per_utt.at(0).dim(0);
  Tensor out({offsets.back(), d});
  for (std::size_t u = 0; u < per_utt.size(); ++u) {
    for (std::size_t k = offsets[u]; k < offsets[u + 1]; ++k) {
      std::copy(per_utt[u].data().begin(), per_utt[u].data().end(), out.row(k));
    }
  }
  return out;
}

Tensor sum_rows(const Tensor& m, std::size_t begin, std::size_t end) {
  Tensor out({m.cols()});
  for (std::size_t k = begin; k < end; ++k) {
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m.at(k, j);
  }
  return out;
}

}  // namespace

BatchCache make_batch_cache(std::span<const Utterance* const> utts, std::size_t n_blocks) {
  if (utts.empty()) throw ConfigError("batch must contain at least one utterance");
  BatchCache c;
  c.utts.assign(utts.begin(), utts.end());
  c.offsets.push_back(0);
  for (const auto* u : utts) {
    if (u->frames.is_null() || u->frames.rank() != 2) throw EmptySequenceError("utterance " + u->utt_id + " has no frames");
    c.offsets.push_back(c.offsets.back() + u->num_frames());
  }
  c.moe_in.resize(n_blocks);
  c.moe_out.resize(n_blocks);
  c.moe_cache.resize(n_blocks);
  c.mem_in.resize(n_blocks);
  c.att_in.resize(n_blocks);
  c.att_cache.resize(n_blocks);
  c.router.resize(n_blocks);
  c.expert_out.resize(n_blocks);
  return c;
}

void forward_begin(const Model& model, BatchCache& c, FlopCounter* flops, EmbedMode mode) {
  const ModelConfig& cfg = model.config;
  std::vector<Tensor> frames;
  for (const auto* u : c.utts) {
    if (u->frames.cols() != cfg.d_feat) {
      throw ConfigError("d_feat: utterance " + u->utt_id + " has " + std::to_string(u->frames.cols()) +
                        " features, model expects " + std::to_string(cfg.d_feat));
    }
    frames.push_back(u->frames);
  }
  c.frames = concat(frames, 0);

  c.emb.assign(c.num_utts(), EmbeddingCache{});
  std::vector<Tensor> e_c, e_a, e_d;
  for (std::size_t u = 0; u < c.num_utts(); ++u) {
    const EmbeddingOutputs out = embed(model.embedding, c.utts[u]->frames, &c.emb[u], flops, mode);
    e_c.push_back(out.e_c);
    if (cfg.augmented()) {
      e_a.push_back(out.e_a);
      e_d.push_back(out.e_d);
    }
  }
  c.router_emb = {};
  c.router_emb.e_c = concat(e_c, 0);
  if (cfg.augmented()) {
    c.router_emb.e_a = repeat_rows(e_a, c.offsets);
    c.router_emb.e_d = repeat_rows(e_d, c.offsets);
  }
  c.input_pre = linear_forward(model.input, c.frames, flops, FlopKind::kBackbone);
  c.moe_in[0] = relu(c.input_pre);
}

void forward_block_end(const Model& model, BatchCache& c, std::size_t block, Tensor moe_y,
                       FlopCounter* flops) {
  check_same_shape(moe_y, c.moe_in[block], "forward_block_end");
  Tensor z = std::move(moe_y);
  if (model.config.moe_residual) add_inplace(z, c.moe_in[block]);
  c.mem_in[block] = z;
  Tensor o(z.shape());
  for (std::size_t u = 0; u < c.num_utts(); ++u) {
    put_rows(o, c.offsets[u],
             memory_forward(model.memory[block], rows_of(z, c.offsets[u], c.offsets[u + 1]), flops));
  }
  const int a = model.attention_after(block);
  if (a >= 0) {
    c.att_in[block] = o;
    c.att_cache[block].assign(c.num_utts(), AttentionCache{});
    for (std::size_t u = 0; u < c.num_utts(); ++u) {
      put_rows(o, c.offsets[u],
               attention_forward(model.attention[static_cast<std::size_t>(a)],
                                 rows_of(c.att_in[block], c.offsets[u], c.offsets[u + 1]),
                                 &c.att_cache[block][u], flops));
    }
  }
  if (block + 1 < model.moe.size()) {
    c.moe_in[block + 1] = std::move(o);
  } else {
    c.final_out = std::move(o);
  }
}

void forward_end(const Model& model, BatchCache& c, FlopCounter* flops) {
  c.logits = linear_forward(model.output, c.final_out, flops, FlopKind::kBackbone);
}

TaskLossGrads task_losses(const Model& model, const BatchCache& c, std::size_t global_batch,
                          const LossWeights& w) {
  TaskLossGrads r;
  const double inv_b = 1.0 / static_cast<double>(global_batch);
  r.g_logits = Tensor(c.logits.shape());
  r.emb_grads.resize(c.num_utts());
  for (std::size_t u = 0; u < c.num_utts(); ++u) {
    const Utterance& utt = *c.utts[u];
    const ScalarWithGrad ctc =
        ctc_loss_from_logits(rows_of(c.logits, c.offsets[u], c.offsets[u + 1]), utt.labels);
    r.ctc_sum += ctc.value;
    put_rows(r.g_logits, c.offsets[u], scale(ctc.grad, inv_b));

    const EmbeddingOutputs& eo = c.emb[u].out;
    EmbeddingOutputGrads& eg = r.emb_grads[u];
    const ScalarWithGrad emb_ctc = ctc_loss_from_logits(eo.grapheme_logits, utt.labels);
    r.emb_ctc_sum += emb_ctc.value;
    eg.grapheme_logits = scale(emb_ctc.grad, w.gamma * inv_b);
    if (model.embedding.has_accent_domain()) {
      const ScalarWithGrad ce_a = cross_entropy(eo.accent_logits, utt.accent_id);
      const ScalarWithGrad ce_d = cross_entropy(eo.domain_logits, utt.domain_id);
      r.accent_sum += ce_a.value;
      r.domain_sum += ce_d.value;
      eg.accent_logits = scale(ce_a.grad, w.eta * inv_b);
      eg.domain_logits = scale(ce_d.grad, w.theta * inv_b);
    }
  }
  return r;
}

BackwardState backward_begin(const Model& model, const BatchCache& c, const Tensor& g_logits,
                             Model& grads) {
  BackwardState st;
  st.g = linear_backward(model.output, c.final_out, g_logits, grads.output);
  st.g_e_c = Tensor::zeros_like(c.router_emb.e_c);
  if (model.config.augmented()) {
    st.g_e_a_rows = Tensor::zeros_like(c.router_emb.e_a);
    st.g_e_d_rows = Tensor::zeros_like(c.router_emb.e_d);
  }
  st.g_after_block.resize(model.moe.size());
  return st;
}

Tensor backward_block_pre(const Model& model, const BatchCache& c, std::size_t block,
                          BackwardState& st, Model& grads) {
  Tensor g = std::move(st.g);
  const int a = model.attention_after(block);
  if (a >= 0) {
    const auto ai = static_cast<std::size_t>(a);
    Tensor g_att(g.shape());
    for (std::size_t u = 0; u < c.num_utts(); ++u) {
      put_rows(g_att, c.offsets[u],
               attention_backward(model.attention[ai], c.att_cache[block][u],
                                  rows_of(g, c.offsets[u], c.offsets[u + 1]), grads.attention[ai]));
    }
    g = std::move(g_att);
  }
  Tensor g_z(g.shape());
  for (std::size_t u = 0; u < c.num_utts(); ++u) {
    put_rows(g_z, c.offsets[u],
             memory_backward(model.memory[block], rows_of(c.mem_in[block], c.offsets[u], c.offsets[u + 1]),
                             rows_of(g, c.offsets[u], c.offsets[u + 1]), grads.memory[block]));
  }
  st.g_after_block[block] = g_z;
  return g_z;
}

void backward_block_finish(const Model& model, std::size_t block, BackwardState& st,
                           const Tensor& g_moe_input, const RouterInputGrads& router_grads) {
  st.g = g_moe_input;
  if (model.config.moe_residual) add_inplace(st.g, st.g_after_block[block]);
  st.g_after_block[block] = Tensor();
  if (model.config.detach_embeddings) return;
  add_inplace(st.g_e_c, router_grads.e_c);
  if (model.config.augmented()) {
    add_inplace(st.g_e_a_rows, router_grads.e_a);
    add_inplace(st.g_e_d_rows, router_grads.e_d);
  }
}

void backward_end(const Model& model, const BatchCache& c, BackwardState& st,
                  const TaskLossGrads& task, Model& grads) {
  const Tensor g_in = relu_backward(c.input_pre, st.g);
  linear_backward(model.input, c.frames, g_in, grads.input);
  for (std::size_t u = 0; u < c.num_utts(); ++u) {
    EmbeddingOutputGrads up = task.emb_grads.at(u);
    const std::size_t b = c.offsets[u], e = c.offsets[u + 1];
    up.e_c = rows_of(st.g_e_c, b, e);
    if (model.config.augmented()) {
      up.e_a = sum_rows(st.g_e_a_rows, b, e);
      up.e_d = sum_rows(st.g_e_d_rows, b, e);
    }
    embed_backward(model.embedding, c.emb[u], up, grads.embedding);
  }
}

AuxTerms aux_losses(const RouterBatch& batch, const LossWeights& w, std::size_t n_layers) {
  const ScalarWithGrad ls = sparsity_loss(batch);
  const ScalarWithGrad lm = mean_importance_loss(batch);
  const double inv_l = 1.0 / static_cast<double>(n_layers);
  AuxTerms a;
  a.l_s = ls.value;
  a.l_m = lm.value;
  a.grad = scale(ls.grad, w.alpha * inv_l);
  axpy_inplace(a.grad, w.beta * inv_l, lm.grad);
  return a;
}

// ---- local reference step -----------------------------------------------------------------

StepResult train_step_local(const Model& model, std::span<const Utterance> batch) {
  const ModelConfig& cfg = model.config;
  const LossWeights w = cfg.effective_weights();
  const std::size_t n_layers = model.moe.size();
  std::vector<const Utterance*> ptrs;
  for (const auto& u : batch) ptrs.push_back(&u);
  BatchCache c = make_batch_cache(ptrs, n_layers);

  forward_begin(model, c, nullptr, EmbedMode::kTraining);
  for (std::size_t l = 0; l < n_layers; ++l) {
    MoEOutput out = moe_forward(model.moe[l], c.moe_in[l], c.router_emb);
    c.moe_cache[l] = std::move(out.cache);
    forward_block_end(model, c, l, std::move(out.y), nullptr);
  }
  forward_end(model, c, nullptr);

  const TaskLossGrads task = task_losses(model, c, batch.size(), w);
  StepResult r;
  LossBreakdown parts;
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  parts.l_c = task.ctc_sum * inv_b;
  parts.l_e = task.emb_ctc_sum * inv_b;
  parts.l_a = task.accent_sum * inv_b;
  parts.l_d = task.domain_sum * inv_b;
  std::vector<Tensor> aux_grads(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    RouterBatch rb{c.moe_cache[l].router.probs};
    const AuxTerms aux = aux_losses(rb, w, n_layers);
    parts.l_s += aux.l_s;
    parts.l_m += aux.l_m;
    aux_grads[l] = aux.grad;
    r.probs.push_back(std::move(rb));
    r.selected.push_back(c.moe_cache[l].router.selected);
  }
  parts.l_s /= static_cast<double>(n_layers);
  parts.l_m /= static_cast<double>(n_layers);
  r.loss = combine(parts, w);

  r.grads = model.zeros_like();
  BackwardState st = backward_begin(model, c, task.g_logits, r.grads);
  for (std::size_t l = n_layers; l-- > 0;) {
    const Tensor g_y = backward_block_pre(model, c, l, st, r.grads);
    const MoEBackwardResult mb = moe_backward(model.moe[l], c.moe_cache[l], g_y, aux_grads[l], r.grads.moe[l]);
    backward_block_finish(model, l, st, mb.grad_input, mb.router_input);
  }
  backward_end(model, c, st, task, r.grads);
  return r;
}

Tensor infer(const Model& model, const Utterance& utt, FlopCounter* flops,
             std::vector<std::vector<std::size_t>>* selected) {
  const Utterance* ptr = &utt;
  BatchCache c = make_batch_cache(std::span<const Utterance* const>(&ptr, 1), model.moe.size());
  forward_begin(model, c, flops, EmbedMode::kInference);
  if (selected) selected->clear();
  for (std::size_t l = 0; l < model.moe.size(); ++l) {
    MoEOutput out = moe_forward(model.moe[l], c.moe_in[l], c.router_emb, flops);
    if (selected) selected->push_back(out.cache.router.selected);
    forward_block_end(model, c, l, std::move(out.y), flops);
  }
  forward_end(model, c, flops);
  return c.logits;
}

}  // namespace speechmoe
