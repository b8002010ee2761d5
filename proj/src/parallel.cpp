// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "speechmoe/parallel.hpp"

#include <algorithm>

#include "speechmoe/errors.hpp"

namespace speechmoe {

std::vector<ExpertRange> partition_experts(std::size_t n_experts, std::size_t n_workers) {
  if (n_workers == 0) throw ConfigError("n_workers must be >= 1");
  std::vector<ExpertRange> out;
  const std::size_t base = n_experts / n_workers;
  const std::size_t extra = n_experts % n_workers;
  std::size_t next = 0;
  for (std::size_t w = 0; w < n_workers; ++w) {
    const std::size_t len = base + (w < extra ? 1 : 0);
    out.push_back({next, next + len});
    next += len;
  }
  return out;
}

std::size_t owner_of(std::span<const ExpertRange> ranges, std::size_t expert) {
  for (std::size_t w = 0; w < ranges.size(); ++w) {
    if (ranges[w].contains(expert)) return w;
  }
  throw PartitionError("expert " + std::to_string(expert) + " is not owned by any worker");
}

namespace {

void check_partition(std::span<const ExpertRange> ranges, std::size_t n_experts) {
  std::size_t next = 0;
  for (const auto& r : ranges) {
    if (r.begin != next || r.end < r.begin) throw PartitionError("expert ranges are not contiguous and disjoint");
    next = r.end;
  }
  if (next != n_experts) {
    throw PartitionError("expert ranges cover [0, " + std::to_string(next) + ") but the layer has " +
                         std::to_string(n_experts) + " experts");
  }
}

}  // namespace

DispatchPlan make_dispatch_plan(std::span<const std::size_t> selected,
                                std::span<const ExpertRange> ranges) {
  DispatchPlan p;
  p.dest.reserve(selected.size());
  for (auto e : selected) p.dest.push_back(owner_of(ranges, e));
  p.order.resize(selected.size());
  for (std::size_t i = 0; i < p.order.size(); ++i) p.order[i] = i;
  std::stable_sort(p.order.begin(), p.order.end(),
                   [&](std::size_t a, std::size_t b) { return p.dest[a] < p.dest[b]; });
  return p;
}

std::vector<std::vector<FrameMessage>> dispatch(const DispatchPlan& plan, const Tensor& rows,
                                                std::span<const std::size_t> selected,
                                                std::size_t src_worker, std::size_t layer,
                                                std::size_t n_workers) {
  std::vector<std::vector<FrameMessage>> out(n_workers);
  for (auto k : plan.order) {
    FrameMessage m;
    m.tag = {static_cast<std::uint32_t>(src_worker), static_cast<std::uint32_t>(k),
             static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(selected[k])};
    m.payload.assign(rows.row(k), rows.row(k) + rows.cols());
    out.at(plan.dest[k]).push_back(std::move(m));
  }
  return out;
}

Tensor combine(std::span<const FrameMessage> returned, std::span<const std::size_t> selected,
               std::size_t src_worker, std::size_t layer, std::size_t width) {
  const std::size_t k = selected.size();
  if (returned.size() != k) {
    throw TransportError("worker " + std::to_string(src_worker) + " layer " + std::to_string(layer) +
                         ": dispatched " + std::to_string(k) + " frames, got " +
                         std::to_string(returned.size()) + " back");
  }
  Tensor out({k, width});
  std::vector<bool> seen(k, false);
  for (const auto& m : returned) {
    const std::size_t f = m.tag.frame;
    if (m.tag.src_worker != src_worker || m.tag.layer != layer || f >= k) {
      throw TransportError("frame returned to the wrong worker or layer");
    }
    if (seen[f]) throw TransportError("frame " + std::to_string(f) + " returned twice");
    if (m.tag.expert != selected[f]) {
      throw TransportError("frame " + std::to_string(f) + " served by expert " +
                           std::to_string(m.tag.expert) + " but router selected " +
                           std::to_string(selected[f]));
    }
    if (m.payload.size() != width) throw TransportError("payload width mismatch");
    seen[f] = true;
    std::copy(m.payload.begin(), m.payload.end(), out.row(f));
  }
  return out;
}

std::vector<WorkerShard> make_shards(const Model& model, std::span<const Utterance> batch,
                                     std::size_t n_workers) {
  const auto ranges = partition_experts(model.config.n_experts, n_workers);
  check_partition(ranges, model.config.n_experts);
  const std::size_t n_layers = model.moe.size();
  std::vector<WorkerShard> shards(n_workers);
  const std::size_t base = batch.size() / n_workers;
  const std::size_t extra = batch.size() % n_workers;
  std::size_t next = 0;
  for (std::size_t w = 0; w < n_workers; ++w) {
    WorkerShard& s = shards[w];
    s.worker_id = w;
    s.local_experts = ranges[w];
    const std::size_t len = base + (w < extra ? 1 : 0);
    for (std::size_t i = 0; i < len; ++i) s.local_batch.push_back(&batch[next + i]);
    next += len;
    s.outbox.resize(n_workers);
    s.routed.assign(n_layers, false);
    s.stash.resize(n_layers);
    if (s.has_batch()) s.cache = make_batch_cache(s.local_batch, n_layers);
  }
  return shards;
}

void exchange(std::vector<WorkerShard>& shards) {
  for (auto& dst : shards) dst.inbox.clear();
  for (auto& src : shards) {
    if (src.outbox.size() != shards.size()) throw TransportError("outbox count differs from worker count");
    for (std::size_t d = 0; d < shards.size(); ++d) {
      auto& box = src.outbox[d];
      auto& in = shards[d].inbox;
      in.insert(in.end(), std::make_move_iterator(box.begin()), std::make_move_iterator(box.end()));
      box.clear();
    }
  }
}

RouterBatch gather_probabilities(std::span<const WorkerShard> shards, std::size_t layer) {
  std::vector<Tensor> parts;
  for (const auto& s : shards) {
    if (!s.has_batch()) continue;
    if (layer >= s.routed.size() || !s.routed[layer]) {
      throw SyncError("worker " + std::to_string(s.worker_id) + " has not routed layer " +
                      std::to_string(layer));
    }
    parts.push_back(s.cache.router[layer].probs);
  }
  if (parts.empty()) throw SyncError("no worker holds frames");
  return {concat(parts, 0)};
}

namespace {

// Owner side: group inbox frames by local expert (inbox order), run `fn` on
// each group's row matrix, and reply to the source workers.
template <typename Fn>
void serve_experts(WorkerShard& owner, std::size_t n_workers, Fn fn) {
  for (std::size_t e = owner.local_experts.begin; e < owner.local_experts.end; ++e) {
    std::vector<const FrameMessage*> msgs;
    for (const auto& m : owner.inbox) {
      if (m.tag.expert == e) msgs.push_back(&m);
    }
    if (msgs.empty()) continue;
    const std::size_t width = msgs[0]->payload.size();
    Tensor rows({msgs.size(), width});
    std::vector<FrameTag> tags;
    for (std::size_t i = 0; i < msgs.size(); ++i) {
      std::copy(msgs[i]->payload.begin(), msgs[i]->payload.end(), rows.row(i));
      tags.push_back(msgs[i]->tag);
    }
    const Tensor result = fn(e, tags, rows);
    for (std::size_t i = 0; i < tags.size(); ++i) {
      FrameMessage reply;
      reply.tag = tags[i];
      reply.payload.assign(result.row(i), result.row(i) + result.cols());
      if (tags[i].src_worker >= n_workers) throw TransportError("reply to unknown worker");
      owner.outbox[tags[i].src_worker].push_back(std::move(reply));
    }
  }
  for (const auto& m : owner.inbox) {
    if (!owner.local_experts.contains(m.tag.expert)) {
      throw TransportError("worker " + std::to_string(owner.worker_id) + " received a frame for expert " +
                           std::to_string(m.tag.expert) + " it does not own");
    }
  }
}

}  // namespace

StepResult step_parallel(const Model& model, std::span<const Utterance> batch, std::size_t n_workers,
                         AuxLossScope scope) {
  if (batch.empty()) throw ConfigError("batch must contain at least one utterance");
  const LossWeights w = model.config.effective_weights();
  const std::size_t n_layers = model.moe.size();
  std::vector<WorkerShard> shards = make_shards(model, batch, n_workers);
  const auto ranges = partition_experts(model.config.n_experts, n_workers);
  std::vector<DispatchPlan> plans(n_workers);

  // ---- forward
  for (auto& s : shards) {
    if (s.has_batch()) forward_begin(model, s.cache, nullptr, EmbedMode::kTraining);
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    const MoELayer& layer = model.moe[l];
    layer.validate();
    for (auto& s : shards) {
      if (!s.has_batch()) continue;
      s.cache.router[l] = route_batch(layer.router, s.cache.router_emb, s.cache.moe_in[l]);
      s.routed[l] = true;
      plans[s.worker_id] = make_dispatch_plan(s.cache.router[l].selected, ranges);
      s.outbox = dispatch(plans[s.worker_id], s.cache.moe_in[l], s.cache.router[l].selected,
                          s.worker_id, l, n_workers);
    }
    exchange(shards);
    for (auto& s : shards) {
      serve_experts(s, n_workers, [&](std::size_t e, const std::vector<FrameTag>& tags, const Tensor& rows) {
        ExpertStash st{e, tags, expert_forward(layer.experts[e], rows)};
        Tensor out = st.cache.out;
        s.stash[l].push_back(std::move(st));
        return out;
      });
    }
    exchange(shards);
    for (auto& s : shards) {
      if (!s.has_batch()) continue;
      const RouterCache& rc = s.cache.router[l];
      s.cache.expert_out[l] = combine(s.inbox, rc.selected, s.worker_id, l, layer.experts[0].out_dim());
      Tensor y = s.cache.expert_out[l];
      for (std::size_t k = 0; k < y.rows(); ++k) {
        double* r = y.row(k);
        for (std::size_t j = 0; j < y.cols(); ++j) r[j] = rc.gate[k] * r[j];
      }
      forward_block_end(model, s.cache, l, std::move(y), nullptr);
    }
  }

  // ---- losses
  std::size_t active = 0;
  std::vector<TaskLossGrads> task(n_workers);
  double ctc = 0, emb_ctc = 0, acc = 0, dom = 0;
  for (auto& s : shards) {
    if (!s.has_batch()) continue;
    ++active;
    forward_end(model, s.cache, nullptr);
    task[s.worker_id] = task_losses(model, s.cache, batch.size(), w);
    ctc += task[s.worker_id].ctc_sum;
    emb_ctc += task[s.worker_id].emb_ctc_sum;
    acc += task[s.worker_id].accent_sum;
    dom += task[s.worker_id].domain_sum;
  }
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossBreakdown parts;
  parts.l_c = ctc * inv_b;
  parts.l_e = emb_ctc * inv_b;
  parts.l_a = acc * inv_b;
  parts.l_d = dom * inv_b;

  StepResult r;
  // aux_grads[l][worker]
  std::vector<std::vector<Tensor>> aux_grads(n_layers, std::vector<Tensor>(n_workers));
  for (std::size_t l = 0; l < n_layers; ++l) {
    RouterBatch global = gather_probabilities(shards, l);
    std::vector<std::size_t> sel;
    for (const auto& s : shards) {
      if (s.has_batch()) sel.insert(sel.end(), s.cache.router[l].selected.begin(), s.cache.router[l].selected.end());
    }
    if (scope == AuxLossScope::kGlobal) {
      const AuxTerms aux = aux_losses(global, w, n_layers);
      parts.l_s += aux.l_s;
      parts.l_m += aux.l_m;
      std::size_t row = 0;
      for (const auto& s : shards) {
        if (!s.has_batch()) continue;
        const std::size_t k = s.cache.frames_total();
        aux_grads[l][s.worker_id] = slice_rows(aux.grad, row, row + k);
        row += k;
      }
    } else {
      LossWeights scaled = w;
      scaled.alpha /= static_cast<double>(active);
      scaled.beta /= static_cast<double>(active);
      for (const auto& s : shards) {
        if (!s.has_batch()) continue;
        const AuxTerms aux = aux_losses({s.cache.router[l].probs}, scaled, n_layers);
        parts.l_s += aux.l_s / static_cast<double>(active);
        parts.l_m += aux.l_m / static_cast<double>(active);
        aux_grads[l][s.worker_id] = aux.grad;
      }
    }
    r.probs.push_back(std::move(global));
    r.selected.push_back(std::move(sel));
  }
  parts.l_s /= static_cast<double>(n_layers);
  parts.l_m /= static_cast<double>(n_layers);
  r.loss = combine(parts, w);

  // ---- backward
  std::vector<Model> grads;
  std::vector<BackwardState> states(n_workers);
  std::vector<Tensor> g_y(n_workers);
  for (auto& s : shards) {
    grads.push_back(model.zeros_like());
    if (s.has_batch()) states[s.worker_id] = backward_begin(model, s.cache, task[s.worker_id].g_logits, grads.back());
  }
  for (std::size_t l = n_layers; l-- > 0;) {
    const MoELayer& layer = model.moe[l];
    for (auto& s : shards) {
      if (!s.has_batch()) continue;
      g_y[s.worker_id] = backward_block_pre(model, s.cache, l, states[s.worker_id], grads[s.worker_id]);
      const RouterCache& rc = s.cache.router[l];
      Tensor g_eo = g_y[s.worker_id];
      for (std::size_t k = 0; k < g_eo.rows(); ++k) {
        double* row = g_eo.row(k);
        for (std::size_t j = 0; j < g_eo.cols(); ++j) row[j] = rc.gate[k] * row[j];
      }
      plans[s.worker_id] = make_dispatch_plan(rc.selected, ranges);
      s.outbox = dispatch(plans[s.worker_id], g_eo, rc.selected, s.worker_id, l, n_workers);
    }
    exchange(shards);
    for (auto& s : shards) {
      std::size_t next_stash = 0;
      serve_experts(s, n_workers, [&](std::size_t e, const std::vector<FrameTag>& tags, const Tensor& rows) {
        if (next_stash >= s.stash[l].size()) throw TransportError("gradient for an expert with no forward stash");
        const ExpertStash& st = s.stash[l][next_stash++];
        if (st.expert != e || st.tags != tags) {
          throw TransportError("backward frames differ from forward frames at worker " +
                               std::to_string(s.worker_id) + " expert " + std::to_string(e));
        }
        return expert_backward(layer.experts[e], st.cache, rows, grads[s.worker_id].moe[l].experts[e]);
      });
      if (next_stash != s.stash[l].size()) throw TransportError("expert stash not fully consumed");
      s.stash[l].clear();
    }
    exchange(shards);
    for (auto& s : shards) {
      if (!s.has_batch()) continue;
      const RouterCache& rc = s.cache.router[l];
      Tensor g_in = combine(s.inbox, rc.selected, s.worker_id, l, layer.router.d_in);
      const Tensor g_probs =
          router_prob_grads(rc, gate_grads(g_y[s.worker_id], s.cache.expert_out[l]), aux_grads[l][s.worker_id]);
      const RouterInputGrads rg = router_backward(layer.router, rc, g_probs, grads[s.worker_id].moe[l].router);
      add_inplace(g_in, rg.o_prev);
      backward_block_finish(model, l, states[s.worker_id], g_in, rg);
    }
  }
  for (auto& s : shards) {
    if (s.has_batch()) backward_end(model, s.cache, states[s.worker_id], task[s.worker_id], grads[s.worker_id]);
  }

  // ---- reduce in ascending worker order
  r.grads = std::move(grads[0]);
  for (std::size_t wkr = 1; wkr < n_workers; ++wkr) {
    std::vector<const Tensor*> src;
    grads[wkr].visit([&](const std::string&, const Tensor& t) { src.push_back(&t); });
    std::size_t i = 0;
    r.grads.visit(ParamVisitor([&](const std::string&, Tensor& t) { add_inplace(t, *src[i++]); }));
  }
  return r;
}

}  // namespace speechmoe
