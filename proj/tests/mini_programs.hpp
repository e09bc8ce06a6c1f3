// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Small program builders shared by the engine tests and the acceptance binary, plus a
// brute-force enumerator of legal interleavings used as an independent race oracle.

#pragma once

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "hpzsim/stream_engine.hpp"

namespace hpz_test {

using hpz::BufferId;
using hpz::BufferStore;
using hpz::GarbagePattern;
using hpz::Lane;
using hpz::OpKind;
using hpz::Program;
using hpz::Region;
using hpz::StreamOp;

inline hpz::ClusterTopology topo(std::size_t nodes, std::size_t dpn) {
  hpz::ClusterTopology t;
  t.nodes = nodes;
  t.devices_per_node = dpn;
  return t;
}

inline hpz::CostModel unit_cost(const hpz::ClusterTopology& t) {
  hpz::CostModel m{t};
  m.compute_time_per_layer_pass = 1e-3;
  m.event_sync_latency = 0.0;
  return m;
}

inline StreamOp compute(const Program& p, std::size_t rank, std::vector<Region> reads = {},
                 std::vector<Region> writes = {}, hpz::Action action = {}) {
  StreamOp op;
  op.stream = p.stream(rank, Lane::Compute);
  op.kind = OpKind::Compute;
  op.compute_passes = 1.0;
  op.reads = std::move(reads);
  op.writes = std::move(writes);
  op.action = std::move(action);
  return op;
}

inline StreamOp copy_op(const Program& p, std::size_t rank, Lane lane, Region src, Region dst) {
  StreamOp op;
  op.stream = p.stream(rank, lane);
  op.kind = OpKind::MemcpyD2D;
  op.reads = {src};
  op.writes = {dst};
  op.payload_bytes = static_cast<double>(src.len * sizeof(float));
  op.action = [src, dst](BufferStore& st) {
    auto in = st.view(src);
    std::copy(in.begin(), in.end(), st.view(dst).begin());
  };
  return op;
}

inline hpz::Action copy_action(Region src, Region dst) {
  return [src, dst](BufferStore& st) {
    auto in = st.view(src);
    std::copy(in.begin(), in.end(), st.view(dst).begin());
  };
}

// ---------------------------------------------------------------------------------------
// Random mini-programs against a brute-force interleaving enumerator.
//
// Each program has a few shared buffers allocated as garbage, at most one writer per shared
// buffer (a copy from a constant source) and readers that copy a shared buffer into an
// output buffer of their own. Reader outputs then depend only on which writes happened
// before them, so two legal interleavings disagree exactly when a read and a write race.

struct MiniProgram {
  Program p{topo(1, 2)};
  std::vector<BufferId> outputs;
};

inline MiniProgram random_program(std::mt19937_64& rng, GarbagePattern garbage) {
  MiniProgram mp;
  auto& p = mp.p;
  std::uniform_int_distribution<int> coin(0, 99);
  std::uniform_int_distribution<std::size_t> dev(0, 1);
  std::uniform_int_distribution<int> lane(0, 2);
  const std::size_t nshared = 1 + coin(rng) % 3;
  std::vector<BufferId> shared, sources;
  for (std::size_t i = 0; i < nshared; ++i) {
    shared.push_back(p.buffers().alloc(2, garbage, 17));
    sources.push_back(p.buffers().adopt({10.0F + static_cast<float>(i), -3.0F}));
  }
  std::vector<bool> written(nshared, false);
  std::vector<hpz::Event> events;
  const std::size_t budget = 4 + coin(rng) % 5;  // 4..8 ops
  while (p.ops().size() < budget) {
    const int pick = coin(rng);
    const std::size_t room = budget - p.ops().size();
    const std::size_t k = static_cast<std::size_t>(coin(rng)) % nshared;
    const Region sh = p.buffers().whole(shared[k]);
    if (pick < 25 && !written[k]) {
      written[k] = true;
      hpz::enqueue(p, copy_op(p, dev(rng), static_cast<Lane>(lane(rng)),
                              p.buffers().whole(sources[k]), sh));
    } else if (pick < 55) {
      const auto out = p.buffers().alloc(2, garbage, 17);
      mp.outputs.push_back(out);
      auto op = compute(p, dev(rng), {sh}, {p.buffers().whole(out)},
                        copy_action(sh, p.buffers().whole(out)));
      op.stream.lane = static_cast<Lane>(lane(rng));
      hpz::enqueue(p, op);
    } else if (pick < 65 && room >= 2) {
      std::vector<hpz::CollectiveMember> members;
      std::vector<Region> outs;
      for (std::size_t r = 0; r < 2; ++r) {
        const auto out = p.buffers().alloc(2, garbage, 17);
        mp.outputs.push_back(out);
        outs.push_back(p.buffers().whole(out));
        members.push_back({hpz::device_rank(r, p.topology()), {sh}, {outs.back()}});
      }
      p.enqueue_collective(hpz::CollectiveKind::AllGather, hpz::world_group(p.topology()),
                           members, 8.0, "g", [sh, outs](BufferStore& st) {
                             for (const auto& o : outs) copy_action(sh, o)(st);
                           });
    } else if (pick < 85) {
      events.push_back(hpz::record_event(p, p.stream(dev(rng), static_cast<Lane>(lane(rng)))));
    } else if (!events.empty()) {
      const auto& e = events[static_cast<std::size_t>(coin(rng)) % events.size()];
      hpz::wait_event(p, p.stream(dev(rng), static_cast<Lane>(lane(rng))), e);
    }
  }
  return mp;
}

using Outcome = std::vector<std::vector<float>>;

inline Outcome outcome(const BufferStore& st, const std::vector<BufferId>& outputs) {
  Outcome o;
  for (auto id : outputs) o.push_back(st.at(id).values);
  return o;
}

inline std::string key_of(const Outcome& o) {
  std::string k;
  for (const auto& v : o) {
    k.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
    k.push_back('|');
  }
  return k;
}

// Enumerates every legal interleaving: stream FIFO, a wait only after its record has run,
// and a collective only once every member is at the head of its stream.
struct Enumerator {
  const Program& p;
  const std::vector<BufferId>& outputs;
  std::set<std::string> outcomes;
  std::map<std::string, Outcome> examples;
  std::size_t complete = 0;

  void go() {
    std::vector<std::size_t> head(p.queues().size(), 0);
    std::vector<bool> done(p.ops().size(), false);
    BufferStore st = p.buffers();
    dfs(head, done, st, 0);
  }

  bool at_head(const std::vector<std::size_t>& head, hpz::OpId id) const {
    const auto& q = p.queues()[p.op(id).stream.index()];
    return head[p.op(id).stream.index()] < q.size() && q[head[p.op(id).stream.index()]] == id;
  }

  void dfs(std::vector<std::size_t>& head, std::vector<bool>& done, const BufferStore& st,
           std::size_t ndone) {
    if (ndone == p.ops().size()) {
      ++complete;
      const auto o = outcome(st, outputs);
      outcomes.insert(key_of(o));
      return;
    }
    std::set<std::size_t> tried_coll;
    for (std::size_t q = 0; q < p.queues().size(); ++q) {
      if (head[q] >= p.queues()[q].size()) continue;
      const auto& op = p.op(p.queues()[q][head[q]]);
      std::vector<hpz::OpId> unit{op.id};
      if (op.collective) {
        if (!tried_coll.insert(*op.collective).second) continue;
        unit = p.collectives()[*op.collective].members;
        bool all = true;
        for (auto m : unit) all = all && at_head(head, m);
        if (!all) continue;
      }
      if (op.kind == OpKind::EventWait) {
        const auto rec = p.event(*op.event).recorded_by;
        if (!rec || !done[*rec]) continue;
      }
      BufferStore next = st;
      if (op.collective) {
        if (p.collectives()[*op.collective].action) p.collectives()[*op.collective].action(next);
      } else if (op.action) {
        op.action(next);
      }
      for (auto m : unit) {
        ++head[p.op(m).stream.index()];
        done[m] = true;
      }
      dfs(head, done, next, ndone + unit.size());
      for (auto m : unit) {
        --head[p.op(m).stream.index()];
        done[m] = false;
      }
    }
  }
};

}  // namespace hpz_test
