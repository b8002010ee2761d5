// Copyright 2026 The SpeechMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "speechmoe/model.hpp"

// Deterministic simulation of expert parallelism. Experts are partitioned
// over workers; routers and all non-expert layers are replicated. Every MoE
// layer runs the fixed schedule route-all, dispatch, exchange, expert
// compute, return, combine. Auxiliary router losses are computed on the
// gathered probabilities of all workers, and gradients are reduced in
// ascending worker order.

namespace speechmoe {

struct ExpertRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  bool contains(std::size_t e) const { return e >= begin && e < end; }
  std::size_t size() const { return end - begin; }
  friend bool operator==(const ExpertRange&, const ExpertRange&) = default;
};

// Contiguous ranges, sizes differing by at most one, extras to the lowest
// worker ids. Workers may own an empty range when n_workers > n_experts.
std::vector<ExpertRange> partition_experts(std::size_t n_experts, std::size_t n_workers);
std::size_t owner_of(std::span<const ExpertRange> ranges, std::size_t expert);

struct FrameTag {
  std::uint32_t src_worker = 0;
  std::uint32_t frame = 0;  // index into the source worker's frame batch
  std::uint32_t layer = 0;
  std::uint32_t expert = 0;
  friend bool operator==(const FrameTag&, const FrameTag&) = default;
};

struct FrameMessage {
  FrameTag tag;
  std::vector<double> payload;
};

struct DispatchPlan {
  std::vector<std::size_t> dest;   // per frame: owner of its selected expert
  std::vector<std::size_t> order;  // frames sorted stably by destination
};

DispatchPlan make_dispatch_plan(std::span<const std::size_t> selected,
                                std::span<const ExpertRange> ranges);
// One outbox per destination worker; messages carry rows of `rows` in plan order.
std::vector<std::vector<FrameMessage>> dispatch(const DispatchPlan& plan, const Tensor& rows,
                                                std::span<const std::size_t> selected,
                                                std::size_t src_worker, std::size_t layer,
                                                std::size_t n_workers);
// Restores frame order from returned messages. Throws TransportError when a
// frame is missing, duplicated, mis-tagged, or was served by an expert the
// router did not select.
Tensor combine(std::span<const FrameMessage> returned, std::span<const std::size_t> selected,
               std::size_t src_worker, std::size_t layer, std::size_t width);

struct ExpertStash {
  std::size_t expert = 0;
  std::vector<FrameTag> tags;
  ExpertCache cache;
};

struct WorkerShard {
  std::size_t worker_id = 0;
  ExpertRange local_experts;
  std::vector<const Utterance*> local_batch;
  std::vector<std::vector<FrameMessage>> outbox;  // per destination worker
  std::vector<FrameMessage> inbox;
  BatchCache cache;
  std::vector<bool> routed;                      // per layer
  std::vector<std::vector<ExpertStash>> stash;   // per layer, experts served here

  bool has_batch() const { return !local_batch.empty(); }
};

// Contiguous utterance slices, sizes differing by at most one.
std::vector<WorkerShard> make_shards(const Model& model, std::span<const Utterance> batch,
                                     std::size_t n_workers);

// Moves every outbox into the destination inbox (ascending source order).
void exchange(std::vector<WorkerShard>& shards);

// Concatenation of all workers' router probabilities for `layer`, in
// (worker id, local frame) order.
RouterBatch gather_probabilities(std::span<const WorkerShard> shards, std::size_t layer);

StepResult step_parallel(const Model& model, std::span<const Utterance> batch, std::size_t n_workers,
                         AuxLossScope scope = AuxLossScope::kGlobal);

}  // namespace speechmoe
