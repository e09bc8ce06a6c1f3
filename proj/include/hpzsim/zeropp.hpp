// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// One training step of sharded data parallelism with hierarchical weight partitioning,
// emitted as a stream program.
//
// Per layer and rank the step touches:
//   primary shard   ceil(N/P) elements, owned across steps (optimizer state lives with it)
//   full params     N elements, gathered before forward and again before backward
//   secondary shard ceil(N/P') elements, copied out of the forward full params so the
//                   backward gather only talks to the P' ranks of the node
//   grad full/shard gradient of the whole layer (padded to P shards) and its reduced slice
//
// Programs are emitted stage by stage across all ranks, so enqueue order matches the order
// a single host thread would issue the work in.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "hpzsim/errors.hpp"
#include "hpzsim/numerics.hpp"
#include "hpzsim/stream_engine.hpp"
#include "hpzsim/topology.hpp"
#include "hpzsim/trainer.hpp"

namespace hpz {

enum class HpzMode { Off, Stock, Fixed };

inline const char* to_string(HpzMode m) {
  switch (m) {
    case HpzMode::Off: return "off";
    case HpzMode::Stock: return "stock";
    case HpzMode::Fixed: return "fixed";
  }
  return "?";
}

struct Scheme {
  HpzMode hpz = HpzMode::Off;
  bool qwz = false;
  bool qgz = false;
  std::size_t prefetch_depth = 1;

  static constexpr int kWeightBits = 8;
  static constexpr std::size_t kWeightBlock = 256;
  static constexpr int kGradBits = 4;
  static constexpr std::size_t kGradBlock = 64;

  bool hierarchical() const noexcept { return hpz != HpzMode::Off; }
  friend bool operator==(const Scheme&, const Scheme&) = default;
};

struct LayerSpec {
  std::size_t elems = 0;       // N_i
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::size_t cost_elems = 0;  // element count charged by the cost model
};

struct ModelSpec {
  std::vector<std::size_t> dims;
  std::vector<LayerSpec> layers;
  std::size_t world_size = 1;            // P
  std::size_t secondary_world_size = 1;  // P'

  void validate() const {
    if (layers.empty()) throw InvalidArgument("model needs at least one layer");
    if (secondary_world_size == 0 || world_size % secondary_world_size != 0) {
      throw InvalidArgument("secondary world size must divide world size");
    }
    for (const auto& l : layers) {
      if (l.elems == 0) throw InvalidArgument("layer element count must be >= 1");
    }
  }
};

/// `cost_elems_override` charges every layer as if it held that many elements, which lets a
/// small numeric model stand in for the communication volume of a large one.
inline ModelSpec make_model_spec(const std::vector<std::size_t>& dims, const ClusterTopology& topo,
                                 std::optional<std::size_t> cost_elems_override = std::nullopt) {
  validate_dims(dims);
  ModelSpec spec;
  spec.dims = dims;
  spec.world_size = topo.world_size();
  spec.secondary_world_size = topo.devices_per_node;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const std::size_t n = dense_layer_elems(dims[i], dims[i + 1]);
    spec.layers.push_back({n, dims[i], dims[i + 1], cost_elems_override.value_or(n)});
  }
  spec.validate();
  return spec;
}

inline std::size_t shard_len(std::size_t n, std::size_t parts) noexcept {
  return (n + parts - 1) / parts;
}

/// Number of real (non-padding) elements in slice `index` of a ceil(n/parts) split.
inline std::size_t shard_valid(std::size_t n, std::size_t parts, std::size_t index) noexcept {
  const std::size_t s = shard_len(n, parts);
  const std::size_t lo = std::min(n, index * s);
  return std::min(n, lo + s) - lo;
}

/// This rank's contiguous 1/P slice, zero-padded to ceil(N/P).
inline Buffer partition_primary(const Buffer& weights, std::size_t world_size,
                                const DeviceRank& rank) {
  if (!weights.initialized) throw UninitializedReadError("partition_primary: weights unset");
  if (world_size == 0 || rank.global >= world_size) {
    throw InvalidArgument("partition_primary: rank outside world");
  }
  const std::size_t n = weights.len();
  const std::size_t s = shard_len(n, world_size);
  Buffer out{BufferId{}, std::vector<float>(s, 0.0F), true};
  const std::size_t lo = std::min(n, rank.global * s);
  const std::size_t valid = shard_valid(n, world_size, rank.global);
  std::copy_n(weights.values.begin() + static_cast<std::ptrdiff_t>(lo), valid, out.values.begin());
  return out;
}

/// The block of P' consecutive ranks holding `rank`'s secondary copy. Equals the node group
/// when P' is the per-node device count.
inline CollectiveGroup secondary_block_group(const DeviceRank& rank, std::size_t p_prime,
                                             const ClusterTopology& topo) {
  if (p_prime == topo.devices_per_node) return secondary_group(rank, topo);
  std::vector<DeviceRank> ranks;
  const std::size_t base = (rank.global / p_prime) * p_prime;
  for (std::size_t i = 0; i < p_prime; ++i) ranks.push_back(device_rank(base + i, topo));
  return make_group(std::move(ranks));
}

enum class Phase { Forward, Backward };
enum class ShardSource { Primary, Secondary };

struct ModuleStep {
  std::size_t layer = 0;
  Phase phase = Phase::Forward;
  friend bool operator==(const ModuleStep&, const ModuleStep&) = default;
};

/// Buffer handles of one layer on one rank. Optional members exist only during the part of
/// the step where the lifecycle allows them.
struct LayerShardSet {
  std::size_t layer = 0;
  BufferId primary_shard;
  std::optional<BufferId> secondary_shard;
  std::optional<BufferId> full_params;
  std::optional<BufferId> grad_full;
  std::optional<BufferId> grad_shard;
};

/// Per-rank values carried from step to step.
struct RankContext {
  DeviceRank rank;
  Scheme scheme;
  std::vector<std::vector<float>> primary;  // per layer, ceil(N/P) each
  std::vector<std::vector<float>> adam_m;
  std::vector<std::vector<float>> adam_v;
  Batch batch;
};

struct StepOptions {
  GarbagePattern garbage = GarbagePattern::nan_fill();
  std::uint64_t garbage_seed = 0;
  OptimizerConfig optimizer;
  std::size_t optimizer_step = 1;  // 1-based, for Adam bias correction
};

/// Every buffer the step allocates, kept after the lifecycle has released it.
struct StepLayout {
  std::vector<std::vector<BufferId>> primary;    // [rank][layer]
  std::vector<std::vector<BufferId>> adam_m;
  std::vector<std::vector<BufferId>> adam_v;
  std::vector<std::vector<std::optional<BufferId>>> secondary;
  std::vector<std::vector<std::optional<BufferId>>> forward_full;
  std::vector<std::vector<std::optional<BufferId>>> backward_full;
  std::vector<std::vector<BufferId>> grad_full;
  std::vector<std::vector<BufferId>> grad_shard;
  std::vector<BufferId> loss;                    // one element per rank
  std::map<std::uint64_t, std::size_t> layer_of; // buffer -> layer, for layer-keyed buffers
};

class StepBuilder {
 public:
  StepBuilder(const ModelSpec& model, const ClusterTopology& topo,
              const std::vector<RankContext>& ranks, StepOptions options)
      : model_(model), topo_(topo), program_(topo), options_(options) {
    model_.validate();
    if (ranks.size() != topo.world_size() || model.world_size != topo.world_size()) {
      throw InvalidProgramError("need one rank context per device");
    }
    scheme_ = ranks.front().scheme;
    for (const auto& r : ranks) {
      if (!(r.scheme == scheme_)) {
        throw InvalidProgramError("rank " + std::to_string(r.rank.global) +
                                  " uses a different scheme");
      }
    }
    allocate_persistent(ranks);
  }

  const Scheme& scheme() const noexcept { return scheme_; }
  Program& program() noexcept { return program_; }
  const StepLayout& layout() const noexcept { return layout_; }
  const LayerShardSet& shards(std::size_t rank, std::size_t layer) const {
    return sets_.at(rank).at(layer);
  }

  /// Enqueues the gather of `layer` into a fresh full-params buffer on every rank. With
  /// qwZ the shards travel as int8 codes plus per-block scale and min.
  void gather_full(std::size_t layer, Phase phase, ShardSource source) {
    const std::size_t P = world();
    for (std::size_t r = 0; r < P; ++r) {
      const auto& set = sets_[r][layer];
      if (source == ShardSource::Secondary && !set.secondary_shard) {
        throw LifecycleError("gather of layer " + std::to_string(layer) +
                             " from a secondary shard that does not exist on rank " +
                             std::to_string(r));
      }
      if (set.full_params) {
        throw LifecycleError("layer " + std::to_string(layer) + " is already gathered");
      }
    }
    if (source == ShardSource::Secondary && scheme_.hpz == HpzMode::Fixed) {
      for (std::size_t r = 0; r < P; ++r) {
        program_.wait_event(stream(r, Lane::Comm), copy_event_.at({r, layer}));
      }
    }

    const auto& spec = model_.layers[layer];
    const std::size_t n = spec.elems;
    for (std::size_t r = 0; r < P; ++r) {
      const BufferId full = alloc(n, layer);
      sets_[r][layer].full_params = full;
      (phase == Phase::Forward ? layout_.forward_full : layout_.backward_full)[r][layer] = full;
    }

    const std::size_t parts = source == ShardSource::Primary ? P : p_prime();
    const double shard_cost = static_cast<double>(shard_len(spec.cost_elems, parts));
    const double payload = scheme_.qwz ? quantized_wire_bytes(shard_cost, Scheme::kWeightBits,
                                                              Scheme::kWeightBlock)
                                       : shard_cost * sizeof(float);
    const std::string tag = phase == Phase::Forward ? "fwd_gather" : "bwd_gather";

    for (const auto& group : gather_groups(source)) {
      std::vector<CollectiveMember> members;
      std::vector<Region> shards;
      std::vector<Region> outs;
      for (const auto& dr : group.ranks) {
        const auto& set = sets_[dr.global][layer];
        const BufferId shard =
            source == ShardSource::Primary ? set.primary_shard : *set.secondary_shard;
        const Region in = program_.buffers().whole(shard);
        const Region out{*set.full_params, 0, n};
        shards.push_back(in);
        outs.push_back(out);
        members.push_back({dr, {in}, {out}});
      }
      program_.enqueue_collective(CollectiveKind::AllGather, group, std::move(members), payload,
                                  tag, make_gather_action(shards, outs, n, scheme_.qwz));
    }

    for (std::size_t r = 0; r < P; ++r) {
      const EventId e = program_.create_event().id;
      program_.record_event(stream(r, Lane::Comm), e);
      gather_event_[{r, layer, phase}] = e;
    }
    gathered_.insert({layer, phase});
  }

  /// Secondary copy of a just-computed forward layer: allocate ceil(N/P') elements of
  /// garbage, then copy this rank's slice of the full params on the Copy lane once the
  /// layer's forward compute is done. Fixed mode records an event behind the copy.
  void create_secondary(std::size_t layer) {
    const std::size_t P = world();
    const std::size_t pp = p_prime();
    const auto& spec = model_.layers[layer];
    const std::size_t n = spec.elems;
    const std::size_t s = shard_len(n, pp);
    for (std::size_t r = 0; r < P; ++r) {
      if (!sets_[r][layer].full_params) {
        throw LifecycleError("create_secondary: layer " + std::to_string(layer) +
                             " has no full params on rank " + std::to_string(r));
      }
    }
    for (std::size_t r = 0; r < P; ++r) {
      auto& set = sets_[r][layer];
      const BufferId sec = alloc(s, layer);
      set.secondary_shard = sec;
      layout_.secondary[r][layer] = sec;

      const std::size_t local = r % pp;
      const std::size_t lo = std::min(n, local * s);
      const std::size_t valid = shard_valid(n, pp, local);
      const Region src{*set.full_params, lo, valid};
      const Region dst{sec, 0, s};

      program_.wait_event(stream(r, Lane::Copy), forward_done_.at({r, layer}));
      StreamOp copy;
      copy.stream = stream(r, Lane::Copy);
      copy.kind = OpKind::MemcpyD2D;
      if (valid > 0) copy.reads = {src};
      copy.writes = {dst};
      copy.payload_bytes = static_cast<double>(shard_len(spec.cost_elems, pp)) * sizeof(float);
      copy.tag = "secondary_copy";
      copy.action = [src, dst](BufferStore& st) {
        auto out = st.view(dst);
        std::fill(out.begin(), out.end(), 0.0F);
        if (src.len > 0) {
          auto in = st.view(src);
          std::copy(in.begin(), in.end(), out.begin());
        }
      };
      program_.enqueue(std::move(copy));
      if (scheme_.hpz == HpzMode::Fixed) {
        const EventId e = program_.create_event().id;
        program_.record_event(stream(r, Lane::Copy), e);
        copy_event_[{r, layer}] = e;
      }
    }
  }

  /// Enqueues gathers for upcoming module executions. Stock enqueues backward gathers with
  /// no ordering against the secondary copy; Fixed makes them wait for it.
  void prefetch_all_gather(const std::vector<ModuleStep>& upcoming) {
    for (const auto& m : upcoming) {
      if (m.phase == Phase::Forward) {
        gather_full(m.layer, Phase::Forward, ShardSource::Primary);
      } else if (scheme_.hierarchical()) {
        if (!sets_[0][m.layer].secondary_shard) {
          throw LifecycleError("backward prefetch of layer " + std::to_string(m.layer) +
                               " before its secondary copy exists");
        }
        gather_full(m.layer, Phase::Backward, ShardSource::Secondary);
      } else {
        gather_full(m.layer, Phase::Backward, ShardSource::Primary);
      }
    }
  }

  /// Gathers the layer now unless a prefetch already did, then orders compute after it.
  void ensure_gathered(std::size_t layer, Phase phase) {
    if (!gathered_.count({layer, phase})) {
      const auto source = phase == Phase::Backward && scheme_.hierarchical()
                              ? ShardSource::Secondary
                              : ShardSource::Primary;
      gather_full(layer, phase, source);
    }
    for (std::size_t r = 0; r < world(); ++r) {
      program_.wait_event(stream(r, Lane::Compute), gather_event_.at({r, layer, phase}));
    }
  }

  void forward(std::size_t layer) {
    const auto& spec = model_.layers[layer];
    const bool last = layer + 1 == model_.layers.size();
    for (std::size_t r = 0; r < world(); ++r) {
      const auto& set = sets_[r][layer];
      if (!set.full_params) throw LifecycleError("forward without gathered params");
      const Region params{*set.full_params, 0, spec.elems};
      const Region in = program_.buffers().whole(input_of(r, layer));
      const Region out = program_.buffers().whole(act_out_[r][layer]);
      StreamOp op;
      op.stream = stream(r, Lane::Compute);
      op.kind = OpKind::Compute;
      op.reads = {params, in};
      op.writes = {out};
      op.compute_passes = 1.0;
      op.tag = "forward";
      const std::size_t batch = batch_;
      const std::size_t in_dim = spec.in_dim;
      const std::size_t out_dim = spec.out_dim;
      if (last) {
        const Region target = program_.buffers().whole(targets_[r]);
        const Region dz = program_.buffers().whole(dz_[r][layer]);
        const Region loss = program_.buffers().whole(layout_.loss[r]);
        op.reads.push_back(target);
        op.writes.push_back(dz);
        op.writes.push_back(loss);
        op.action = [=](BufferStore& st) {
          layer_forward(st.view(params), st.view(in), batch, in_dim, out_dim, false, st.view(out));
          st.view(loss)[0] = mse_loss(st.view(out), st.view(target), st.view(dz));
        };
      } else {
        op.action = [=](BufferStore& st) {
          layer_forward(st.view(params), st.view(in), batch, in_dim, out_dim, true, st.view(out));
        };
      }
      program_.enqueue(std::move(op));
      const EventId e = program_.create_event().id;
      program_.record_event(stream(r, Lane::Compute), e);
      forward_done_[{r, layer}] = e;
    }
  }

  /// Drops the forward full params once forward (and the secondary copy) are enqueued.
  void release_forward(std::size_t layer) {
    for (std::size_t r = 0; r < world(); ++r) sets_[r][layer].full_params.reset();
  }

  void backward(std::size_t layer) {
    const auto& spec = model_.layers[layer];
    for (std::size_t r = 0; r < world(); ++r) {
      const auto& set = sets_[r][layer];
      if (!set.full_params) throw LifecycleError("backward without gathered params");
      const Region params{*set.full_params, 0, spec.elems};
      const Region in = program_.buffers().whole(input_of(r, layer));
      const Region dz = program_.buffers().whole(dz_[r][layer]);
      const Region grad = program_.buffers().whole(*set.grad_full);
      StreamOp op;
      op.stream = stream(r, Lane::Compute);
      op.kind = OpKind::Compute;
      op.reads = {params, in, dz};
      op.writes = {grad};
      op.compute_passes = 1.0;
      op.tag = "backward";
      std::optional<Region> dprev;
      if (layer > 0) {
        dprev = program_.buffers().whole(dz_[r][layer - 1]);
        op.writes.push_back(*dprev);
      }
      const std::size_t batch = batch_;
      const std::size_t in_dim = spec.in_dim;
      const std::size_t out_dim = spec.out_dim;
      op.action = [=](BufferStore& st) {
        auto g = st.view(grad);
        std::fill(g.begin(), g.end(), 0.0F);
        layer_backward(st.view(params), st.view(in), st.view(dz), batch, in_dim, out_dim, g,
                       dprev ? std::optional<std::span<float>>(st.view(*dprev)) : std::nullopt);
      };
      program_.enqueue(std::move(op));
      const EventId e = program_.create_event().id;
      program_.record_event(stream(r, Lane::Compute), e);
      backward_done_[{r, layer}] = e;
    }
  }

  /// Releases the backward full params. The primary shard stays; the secondary shard stays
  /// until the step ends.
  void repartition(std::size_t layer) {
    for (std::size_t r = 0; r < world(); ++r) {
      if (!sets_[r][layer].full_params) {
        throw LifecycleError("repartition of layer " + std::to_string(layer) +
                             " without gathered params");
      }
    }
    for (std::size_t r = 0; r < world(); ++r) sets_[r][layer].full_params.reset();
  }

  /// Mean-reduces the layer gradient so each rank ends with its 1/P slice. qgZ replaces the
  /// f32 reduce-scatter with an int4 all-to-all followed by a local reduction.
  void reduce_gradients(std::size_t layer) {
    const std::size_t P = world();
    const auto& spec = model_.layers[layer];
    const std::size_t s = shard_len(spec.elems, P);
    for (std::size_t r = 0; r < P; ++r) {
      program_.wait_event(stream(r, Lane::Comm), backward_done_.at({r, layer}));
    }
    const auto group = world_group(topo_);
    std::vector<CollectiveMember> members;
    std::vector<Region> grads;
    std::vector<Region> outs;
    for (std::size_t r = 0; r < P; ++r) {
      auto& set = sets_[r][layer];
      set.grad_shard = layout_.grad_shard[r][layer];
      const Region g = program_.buffers().whole(*set.grad_full);
      const Region o = program_.buffers().whole(*set.grad_shard);
      grads.push_back(g);
      outs.push_back(o);
      members.push_back({group.ranks[r], {g}, {o}});
    }
    const double shard_cost = static_cast<double>(shard_len(spec.cost_elems, P));
    const double payload =
        scheme_.qgz ? quantized_wire_bytes(shard_cost, Scheme::kGradBits, Scheme::kGradBlock)
                    : shard_cost * sizeof(float);
    const auto kind = scheme_.qgz ? CollectiveKind::AllToAll : CollectiveKind::ReduceScatter;
    program_.enqueue_collective(kind, group, std::move(members), payload, "grad_reduce",
                                make_reduce_action(grads, outs, s, scheme_.qgz));
  }

  /// Device sync, then one optimizer update over every primary shard of the rank.
  void optimizer_step() {
    const std::size_t P = world();
    for (std::size_t r = 0; r < P; ++r) {
      program_.host_sync(device_rank(r, topo_));
      StreamOp op;
      op.stream = stream(r, Lane::Compute);
      op.kind = OpKind::Compute;
      op.tag = "optimizer";
      std::vector<Region> w, g, m, v;
      std::vector<std::size_t> valid;
      double bytes = 0.0;
      for (std::size_t l = 0; l < model_.layers.size(); ++l) {
        const auto& set = sets_[r][l];
        if (!set.grad_shard) throw LifecycleError("optimizer step before gradient reduction");
        w.push_back(program_.buffers().whole(set.primary_shard));
        g.push_back(program_.buffers().whole(*set.grad_shard));
        m.push_back(program_.buffers().whole(layout_.adam_m[r][l]));
        v.push_back(program_.buffers().whole(layout_.adam_v[r][l]));
        valid.push_back(shard_valid(model_.layers[l].elems, P, r));
        bytes += 3.0 * static_cast<double>(shard_len(model_.layers[l].cost_elems, P)) *
                 sizeof(float);
      }
      op.reads = w;
      op.reads.insert(op.reads.end(), g.begin(), g.end());
      op.reads.insert(op.reads.end(), m.begin(), m.end());
      op.reads.insert(op.reads.end(), v.begin(), v.end());
      op.writes = w;
      op.writes.insert(op.writes.end(), m.begin(), m.end());
      op.writes.insert(op.writes.end(), v.begin(), v.end());
      op.payload_bytes = bytes;
      const OptimizerConfig cfg = options_.optimizer;
      const std::size_t t = options_.optimizer_step;
      op.action = [=](BufferStore& st) {
        for (std::size_t l = 0; l < w.size(); ++l) {
          apply_update(cfg, t, st.view(w[l]), st.view(g[l]), st.view(m[l]), st.view(v[l]),
                       valid[l]);
        }
      };
      program_.enqueue(std::move(op));
    }
  }

  /// Secondary shards live until the step ends.
  void end_step() {
    for (auto& rank_sets : sets_) {
      for (auto& set : rank_sets) set.secondary_shard.reset();
    }
  }

  /// Module executions in step order: forward 0..N-1, then backward N-1..0.
  std::vector<ModuleStep> execution_order() const {
    std::vector<ModuleStep> seq;
    const std::size_t n = model_.layers.size();
    for (std::size_t i = 0; i < n; ++i) seq.push_back({i, Phase::Forward});
    for (std::size_t i = n; i-- > 0;) seq.push_back({i, Phase::Backward});
    return seq;
  }

  /// The next `prefetch_depth` executions after position `pos` that still need a gather. A
  /// backward gather cannot be issued before its layer's forward has been enqueued, so such
  /// entries are left to the ensure point.
  std::vector<ModuleStep> upcoming(std::size_t pos) const {
    const auto seq = execution_order();
    std::vector<ModuleStep> out;
    for (std::size_t k = pos + 1; k < seq.size() && k <= pos + scheme_.prefetch_depth; ++k) {
      const auto& m = seq[k];
      if (gathered_.count({m.layer, m.phase})) continue;
      if (m.phase == Phase::Backward && !forward_enqueued_.count(m.layer)) continue;
      out.push_back(m);
    }
    return out;
  }

  /// Emits the full step in host issue order.
  void build() {
    const auto seq = execution_order();
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
      const auto [layer, phase] = seq[pos];
      ensure_gathered(layer, phase);
      prefetch_all_gather(upcoming(pos));
      if (phase == Phase::Forward) {
        forward(layer);
        if (scheme_.hierarchical()) create_secondary(layer);
        release_forward(layer);
        forward_enqueued_.insert(layer);
      } else {
        backward(layer);
        repartition(layer);
        reduce_gradients(layer);
      }
    }
    optimizer_step();
    end_step();
  }

  /// Value effect of a gather: concatenate the shards (through an int8 round trip with
  /// qwZ), truncate to `n` and copy the result to every output.
  static Action make_gather_action(std::vector<Region> shards, std::vector<Region> outs,
                                   std::size_t n, bool qwz) {
    return [shards = std::move(shards), outs = std::move(outs), n, qwz](BufferStore& st) {
      std::vector<float> gathered;
      for (const auto& r : shards) {
        const auto values = st.view(r);
        if (!qwz) {
          gathered.insert(gathered.end(), values.begin(), values.end());
          continue;
        }
        std::vector<float> decoded(values.size());
        try {
          dequantize_into(quantize_blockwise(values, Scheme::kWeightBits, Scheme::kWeightBlock),
                          decoded);
        } catch (const QuantizationDomainError&) {
          // A non-finite shard has no valid encoding; the receivers see NaN.
          std::fill(decoded.begin(), decoded.end(), std::numeric_limits<float>::quiet_NaN());
        }
        gathered.insert(gathered.end(), decoded.begin(), decoded.end());
      }
      gathered.resize(n);
      for (const auto& o : outs) std::copy(gathered.begin(), gathered.end(), st.view(o).begin());
    };
  }

  /// Value effect of a gradient reduction: output `dst` gets the mean over ranks of slice
  /// `dst` of every gradient, each slice first round-tripped through int4 with qgZ.
  static Action make_reduce_action(std::vector<Region> grads, std::vector<Region> outs,
                                   std::size_t s, bool qgz) {
    return [grads = std::move(grads), outs = std::move(outs), s, qgz](BufferStore& st) {
      const std::size_t P = grads.size();
      std::vector<double> acc(s);
      std::vector<float> decoded(s);
      for (std::size_t dst = 0; dst < P; ++dst) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t src = 0; src < P; ++src) {
          const auto slice = st.view(grads[src]).subspan(dst * s, s);
          if (qgz) {
            try {
              dequantize_into(quantize_blockwise(slice, Scheme::kGradBits, Scheme::kGradBlock),
                              decoded);
            } catch (const QuantizationDomainError&) {
              std::fill(decoded.begin(), decoded.end(), std::numeric_limits<float>::quiet_NaN());
            }
          } else {
            std::copy(slice.begin(), slice.end(), decoded.begin());
          }
          for (std::size_t i = 0; i < s; ++i) acc[i] += decoded[i];
        }
        auto out = st.view(outs[dst]);
        for (std::size_t i = 0; i < s; ++i) {
          out[i] = static_cast<float>(acc[i] / static_cast<double>(P));
        }
      }
    };
  }

 private:
  std::size_t world() const noexcept { return model_.world_size; }
  std::size_t p_prime() const noexcept { return model_.secondary_world_size; }
  StreamId stream(std::size_t r, Lane lane) const { return program_.stream(r, lane); }

  BufferId alloc(std::size_t len, std::optional<std::size_t> layer = std::nullopt) {
    const BufferId id = program_.buffers().alloc(len, options_.garbage, options_.garbage_seed);
    if (layer) layout_.layer_of[id.value] = *layer;
    return id;
  }
  BufferId adopt(std::vector<float> values, std::optional<std::size_t> layer = std::nullopt) {
    const BufferId id = program_.buffers().adopt(std::move(values));
    if (layer) layout_.layer_of[id.value] = *layer;
    return id;
  }

  BufferId input_of(std::size_t r, std::size_t layer) const {
    return layer == 0 ? inputs_[r] : act_out_[r][layer - 1];
  }

  std::vector<CollectiveGroup> gather_groups(ShardSource source) const {
    if (source == ShardSource::Primary) return {world_group(topo_)};
    std::vector<CollectiveGroup> groups;
    for (std::size_t base = 0; base < world(); base += p_prime()) {
      groups.push_back(secondary_block_group(device_rank(base, topo_), p_prime(), topo_));
    }
    return groups;
  }

  void allocate_persistent(const std::vector<RankContext>& ranks) {
    const std::size_t P = world();
    const std::size_t L = model_.layers.size();
    batch_ = ranks.front().batch.size;
    auto grid = [&](auto& v) { v.assign(P, std::decay_t<decltype(v[0])>(L)); };
    grid(layout_.primary);
    grid(layout_.adam_m);
    grid(layout_.adam_v);
    grid(layout_.secondary);
    grid(layout_.forward_full);
    grid(layout_.backward_full);
    grid(layout_.grad_full);
    grid(layout_.grad_shard);
    sets_.assign(P, std::vector<LayerShardSet>(L));
    act_out_.assign(P, std::vector<BufferId>(L));
    dz_.assign(P, std::vector<BufferId>(L));

    for (std::size_t r = 0; r < P; ++r) {
      const auto& ctx = ranks[r];
      if (ctx.rank.global != r || ctx.primary.size() != L || ctx.adam_m.size() != L ||
          ctx.adam_v.size() != L || ctx.batch.size != batch_) {
        throw InvalidProgramError("rank context " + std::to_string(r) + " is malformed");
      }
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t s = shard_len(model_.layers[l].elems, P);
        if (ctx.primary[l].size() != s || ctx.adam_m[l].size() != s || ctx.adam_v[l].size() != s) {
          throw InvalidProgramError("rank " + std::to_string(r) + " layer " + std::to_string(l) +
                                    " shard has the wrong length");
        }
        layout_.primary[r][l] = adopt(ctx.primary[l], l);
        layout_.adam_m[r][l] = adopt(ctx.adam_m[l], l);
        layout_.adam_v[r][l] = adopt(ctx.adam_v[l], l);
        sets_[r][l].layer = l;
        sets_[r][l].primary_shard = layout_.primary[r][l];
      }
      inputs_.push_back(adopt(ctx.batch.inputs));
      targets_.push_back(adopt(ctx.batch.targets));
      layout_.loss.push_back(alloc(1));
      for (std::size_t l = 0; l < L; ++l) {
        act_out_[r][l] = alloc(batch_ * model_.layers[l].out_dim);
        dz_[r][l] = alloc(batch_ * model_.layers[l].out_dim);
        const std::size_t s = shard_len(model_.layers[l].elems, P);
        layout_.grad_full[r][l] = alloc(s * P, l);
        layout_.grad_shard[r][l] = alloc(s, l);
        sets_[r][l].grad_full = layout_.grad_full[r][l];
      }
    }
  }

  ModelSpec model_;
  ClusterTopology topo_;
  Program program_;
  StepOptions options_;
  Scheme scheme_;
  StepLayout layout_;
  std::vector<std::vector<LayerShardSet>> sets_;
  std::vector<BufferId> inputs_;
  std::vector<BufferId> targets_;
  std::vector<std::vector<BufferId>> act_out_;
  std::vector<std::vector<BufferId>> dz_;
  std::size_t batch_ = 0;

  std::set<std::pair<std::size_t, Phase>> gathered_;
  std::set<std::size_t> forward_enqueued_;
  std::map<std::tuple<std::size_t, std::size_t, Phase>, EventId> gather_event_;
  std::map<std::pair<std::size_t, std::size_t>, EventId> forward_done_;
  std::map<std::pair<std::size_t, std::size_t>, EventId> backward_done_;
  std::map<std::pair<std::size_t, std::size_t>, EventId> copy_event_;
};

struct StepProgram {
  Program program;
  StepLayout layout;
};

/// Emits one training step for all ranks in the order the host issues it.
inline StepProgram build_step_program(const ModelSpec& model, const ClusterTopology& topo,
                                      const std::vector<RankContext>& ranks,
                                      const StepOptions& options = {}) {
  StepBuilder builder(model, topo, ranks, options);
  builder.build();
  return {std::move(builder.program()), builder.layout()};
}

/// Rank contexts for step 0: primary shards cut from `model`, zeroed moments, one batch each.
inline std::vector<RankContext> make_rank_contexts(const ModelSpec& spec, const Scheme& scheme,
                                                   const ToyModel& model,
                                                   const SyntheticTask& task,
                                                   const ClusterTopology& topo) {
  std::vector<RankContext> out;
  const std::size_t P = spec.world_size;
  for (std::size_t r = 0; r < P; ++r) {
    RankContext ctx;
    ctx.rank = device_rank(r, topo);
    ctx.scheme = scheme;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
      const Buffer w{BufferId{}, model.params[l], true};
      auto shard = partition_primary(w, P, ctx.rank);
      ctx.adam_m.emplace_back(shard.len(), 0.0F);
      ctx.adam_v.emplace_back(shard.len(), 0.0F);
      ctx.primary.push_back(std::move(shard.values));
    }
    ctx.batch = task.sample(r);
    out.push_back(std::move(ctx));
  }
  return out;
}

}  // namespace hpz
