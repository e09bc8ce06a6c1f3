// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Stream-ordered execution of a device program.
//
// Every device owns three FIFO lanes (Compute, Copy, Comm). Ops on different lanes are
// unordered unless an event record/wait pair, a host sync, or a collective rendezvous
// orders them. `run` interprets a program under a schedule policy that picks among the
// ops that are legally runnable; value effects are applied in that order, while start
// and end times come from the cost model. `detect_hazards` checks the same ordering
// rules statically.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hpzsim/errors.hpp"
#include "hpzsim/numerics.hpp"
#include "hpzsim/topology.hpp"

namespace hpz {

using OpId = std::size_t;
using EventId = std::size_t;
using CollectiveId = std::size_t;

enum class Lane : std::uint8_t { Compute = 0, Copy = 1, Comm = 2 };
inline constexpr std::size_t kLanesPerDevice = 3;

inline const char* to_string(Lane lane) {
  switch (lane) {
    case Lane::Compute: return "compute";
    case Lane::Copy: return "copy";
    case Lane::Comm: return "comm";
  }
  return "?";
}

struct StreamId {
  DeviceRank device;
  Lane lane = Lane::Compute;

  std::size_t index() const noexcept {
    return device.global * kLanesPerDevice + static_cast<std::size_t>(lane);
  }
  friend bool operator==(const StreamId& a, const StreamId& b) {
    return a.device.global == b.device.global && a.lane == b.lane;
  }
};

enum class OpKind {
  Compute,
  MemcpyD2D,
  AllGather,
  ReduceScatter,
  AllToAll,
  EventRecord,
  EventWait,
  HostSync
};

inline const char* to_string(OpKind kind) {
  switch (kind) {
    case OpKind::Compute: return "Compute";
    case OpKind::MemcpyD2D: return "MemcpyD2D";
    case OpKind::AllGather: return "AllGather";
    case OpKind::ReduceScatter: return "ReduceScatter";
    case OpKind::AllToAll: return "AllToAll";
    case OpKind::EventRecord: return "EventRecord";
    case OpKind::EventWait: return "EventWait";
    case OpKind::HostSync: return "HostSync";
  }
  return "?";
}

inline bool is_collective(OpKind kind) noexcept {
  return kind == OpKind::AllGather || kind == OpKind::ReduceScatter || kind == OpKind::AllToAll;
}

inline OpKind op_kind(CollectiveKind kind) noexcept {
  switch (kind) {
    case CollectiveKind::AllGather: return OpKind::AllGather;
    case CollectiveKind::ReduceScatter: return OpKind::ReduceScatter;
    case CollectiveKind::AllToAll: return OpKind::AllToAll;
  }
  return OpKind::AllGather;
}

/// Value-level effect of an op, applied when the scheduler executes it.
using Action = std::function<void(BufferStore&)>;

struct StreamOp {
  OpId id = 0;
  StreamId stream;
  OpKind kind = OpKind::Compute;
  std::vector<Region> reads;
  std::vector<Region> writes;
  std::optional<CollectiveGroup> group;
  double payload_bytes = 0.0;   // collectives: per-rank shard bytes; copies: bytes moved
  double compute_passes = 0.0;  // Compute: multiples of the per-layer-pass compute time
  std::string tag;              // free-form label used for traffic attribution
  std::optional<EventId> event;
  std::optional<CollectiveId> collective;
  Action action;
};

struct Event {
  EventId id = 0;
  std::optional<OpId> recorded_by;
};

struct CollectiveMember {
  DeviceRank rank;
  std::vector<Region> reads;
  std::vector<Region> writes;
};

struct CollectiveInfo {
  CollectiveKind kind = CollectiveKind::AllGather;
  CollectiveGroup group;
  std::vector<OpId> members;
  double payload_bytes = 0.0;
  std::string tag;
  Action action;
};

class Program {
 public:
  explicit Program(ClusterTopology topology)
      : topology_(std::move(topology)), queues_(topology_.world_size() * kLanesPerDevice) {
    topology_.validate();
  }

  const ClusterTopology& topology() const noexcept { return topology_; }
  BufferStore& buffers() noexcept { return store_; }
  const BufferStore& buffers() const noexcept { return store_; }

  StreamId stream(std::size_t global_rank, Lane lane) const {
    return {device_rank(global_rank, topology_), lane};
  }

  /// Appends `op` to its stream queue. Collective and event kinds have dedicated entry points.
  OpId enqueue(StreamOp op) {
    if (is_collective(op.kind)) {
      throw InvalidProgramError("collective ops must be enqueued through enqueue_collective");
    }
    if (op.kind == OpKind::EventRecord || op.kind == OpKind::EventWait ||
        op.kind == OpKind::HostSync) {
      throw InvalidProgramError("event and sync ops must be enqueued through their helpers");
    }
    check_stream(op.stream);
    check_regions(op.reads);
    check_regions(op.writes);
    return push(std::move(op));
  }

  /// Enqueues one member op per rank on that rank's Comm lane. The action runs once, when
  /// the rendezvous completes.
  std::vector<OpId> enqueue_collective(CollectiveKind kind, const CollectiveGroup& group,
                                       std::vector<CollectiveMember> members,
                                       double payload_bytes_per_rank, std::string tag,
                                       Action action) {
    if (members.size() != group.size()) {
      throw InvalidProgramError("collective needs exactly one member per group rank");
    }
    const CollectiveId cid = collectives_.size();
    CollectiveInfo info{kind, group, {}, payload_bytes_per_rank, tag, std::move(action)};
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (members[i].rank.global != group.ranks[i].global) {
        throw InvalidProgramError("collective members must follow group rank order");
      }
      check_regions(members[i].reads);
      check_regions(members[i].writes);
    }
    for (auto& m : members) {
      StreamOp op;
      op.stream = stream(m.rank.global, Lane::Comm);
      op.kind = op_kind(kind);
      op.reads = std::move(m.reads);
      op.writes = std::move(m.writes);
      op.group = group;
      op.payload_bytes = payload_bytes_per_rank;
      op.tag = tag;
      op.collective = cid;
      info.members.push_back(push(std::move(op)));
    }
    collectives_.push_back(std::move(info));
    return collectives_.back().members;
  }

  Event create_event() {
    events_.push_back(Event{events_.size(), std::nullopt});
    return events_.back();
  }

  /// Records a previously created event on `s`. It completes once all earlier ops on `s` do.
  OpId record_event(const StreamId& s, EventId e) {
    check_stream(s);
    check_event(e);
    if (events_[e].recorded_by) {
      throw InvalidProgramError("event " + std::to_string(e) + " is already recorded");
    }
    StreamOp op;
    op.stream = s;
    op.kind = OpKind::EventRecord;
    op.event = e;
    const OpId id = push(std::move(op));
    events_[e].recorded_by = id;
    return id;
  }

  Event record_event(const StreamId& s) {
    const Event e = create_event();
    record_event(s, e.id);
    return events_[e.id];
  }

  /// Subsequent ops on `s` happen after the event's record completes.
  OpId wait_event(const StreamId& s, EventId e) {
    check_stream(s);
    check_event(e);
    StreamOp op;
    op.stream = s;
    op.kind = OpKind::EventWait;
    op.event = e;
    return push(std::move(op));
  }

  /// Device-wide barrier on the Compute lane: after every earlier op of the device, before
  /// every later one.
  OpId host_sync(const DeviceRank& device) {
    StreamOp op;
    op.stream = stream(device.global, Lane::Compute);
    op.kind = OpKind::HostSync;
    const OpId id = push(std::move(op));
    host_syncs_[device.global].push_back(id);
    return id;
  }

  const std::vector<StreamOp>& ops() const noexcept { return ops_; }
  const StreamOp& op(OpId id) const { return ops_.at(id); }
  const std::vector<Event>& events() const noexcept { return events_; }
  const Event& event(EventId id) const { return events_.at(id); }
  const std::vector<CollectiveInfo>& collectives() const noexcept { return collectives_; }
  const std::vector<OpId>& queue(const StreamId& s) const { return queues_.at(s.index()); }
  const std::vector<std::vector<OpId>>& queues() const noexcept { return queues_; }
  const std::vector<OpId>& host_syncs(std::size_t device) const {
    static const std::vector<OpId> none;
    auto it = host_syncs_.find(device);
    return it == host_syncs_.end() ? none : it->second;
  }

 private:
  OpId push(StreamOp op) {
    op.id = ops_.size();
    queues_[op.stream.index()].push_back(op.id);
    ops_.push_back(std::move(op));
    return ops_.back().id;
  }

  void check_stream(const StreamId& s) const {
    if (s.device.global >= topology_.world_size()) {
      throw InvalidProgramError("stream on unknown device " + std::to_string(s.device.global));
    }
  }
  void check_event(EventId e) const {
    if (e >= events_.size()) throw InvalidProgramError("unknown event " + std::to_string(e));
  }
  void check_regions(const std::vector<Region>& regions) const {
    for (const auto& r : regions) {
      if (!store_.contains(r)) {
        throw InvalidProgramError("region references buffer " + std::to_string(r.buffer.value) +
                                  " [" + std::to_string(r.offset) + ", " +
                                  std::to_string(r.end()) + ") that is not allocated");
      }
    }
  }

  ClusterTopology topology_;
  BufferStore store_;
  std::vector<StreamOp> ops_;
  std::vector<std::vector<OpId>> queues_;
  std::vector<Event> events_;
  std::vector<CollectiveInfo> collectives_;
  std::map<std::size_t, std::vector<OpId>> host_syncs_;
};

// Free-function spellings of the program-building API.
inline OpId enqueue(Program& program, StreamOp op) { return program.enqueue(std::move(op)); }
inline Event record_event(Program& program, const StreamId& stream) {
  return program.record_event(stream);
}
inline OpId wait_event(Program& program, const StreamId& stream, const Event& e) {
  return program.wait_event(stream, e.id);
}

struct SchedulePolicy {
  enum class Variant { ProgramOrder, Adversarial, RandomSeeded };
  Variant variant = Variant::ProgramOrder;
  std::uint64_t seed = 0;

  static SchedulePolicy program_order() { return {Variant::ProgramOrder, 0}; }
  static SchedulePolicy adversarial() { return {Variant::Adversarial, 0}; }
  static SchedulePolicy random(std::uint64_t seed) { return {Variant::RandomSeeded, seed}; }
};

inline const char* to_string(SchedulePolicy::Variant v) {
  switch (v) {
    case SchedulePolicy::Variant::ProgramOrder: return "program-order";
    case SchedulePolicy::Variant::Adversarial: return "adversarial";
    case SchedulePolicy::Variant::RandomSeeded: return "random";
  }
  return "?";
}

struct Hazard {
  enum class Kind { ReadBeforeWriteCommit };
  OpId writer = 0;
  OpId reader = 0;
  Region region;
  Kind kind = Kind::ReadBeforeWriteCommit;
};

struct TraceEntry {
  OpId op = 0;
  double start = 0.0;
  double end = 0.0;
};

struct Trace {
  std::vector<TraceEntry> entries;  // execution order
  BufferStore buffers;              // final buffer states
  std::map<std::pair<LinkClass, std::string>, double> volume;  // wire bytes by (class, tag)
  double makespan = 0.0;

  double bytes(LinkClass c) const {
    double total = 0.0;
    for (const auto& [key, v] : volume) {
      if (key.first == c) total += v;
    }
    return total;
  }
  double bytes(LinkClass c, const std::string& tag) const {
    auto it = volume.find({c, tag});
    return it == volume.end() ? 0.0 : it->second;
  }
};

namespace detail {

class Bitset {
 public:
  explicit Bitset(std::size_t n = 0) : words_((n + 63) / 64, 0) {}
  void set(std::size_t i) { words_[i / 64] |= (1ULL << (i % 64)); }
  bool test(std::size_t i) const { return (words_[i / 64] >> (i % 64)) & 1ULL; }
  void merge(const Bitset& o) {
    for (std::size_t i = 0; i < words_.size(); ++i) words_[i] |= o.words_[i];
  }

 private:
  std::vector<std::uint64_t> words_;
};

/// Ops grouped into scheduling units: a collective's members form one unit.
struct UnitMap {
  std::vector<std::size_t> unit_of;            // op -> unit
  std::vector<std::vector<OpId>> members;      // unit -> ops, ascending
};

inline UnitMap build_units(const Program& p) {
  UnitMap m;
  m.unit_of.assign(p.ops().size(), 0);
  std::vector<std::optional<std::size_t>> coll_unit(p.collectives().size());
  for (const auto& op : p.ops()) {
    if (op.collective) {
      auto& slot = coll_unit[*op.collective];
      if (!slot) {
        slot = m.members.size();
        m.members.push_back(p.collectives()[*op.collective].members);
      }
      m.unit_of[op.id] = *slot;
    } else {
      m.unit_of[op.id] = m.members.size();
      m.members.push_back({op.id});
    }
  }
  return m;
}

}  // namespace detail

/// Static happens-before analysis. Reports every writer/reader pair on overlapping regions
/// that no chain of stream order, event edges, host syncs or collective rendezvous orders.
inline std::vector<Hazard> detect_hazards(const Program& p) {
  const auto units = detail::build_units(p);
  const std::size_t n = units.members.size();
  std::vector<std::set<std::size_t>> succ(n);
  auto edge = [&](OpId from, OpId to) {
    const auto a = units.unit_of[from];
    const auto b = units.unit_of[to];
    if (a != b) succ[a].insert(b);
  };

  for (const auto& q : p.queues()) {
    for (std::size_t i = 1; i < q.size(); ++i) edge(q[i - 1], q[i]);
  }
  for (const auto& op : p.ops()) {
    if (op.kind == OpKind::EventWait) {
      if (auto rec = p.event(*op.event).recorded_by) edge(*rec, op.id);
    }
  }
  const std::size_t world = p.topology().world_size();
  for (std::size_t d = 0; d < world; ++d) {
    for (OpId h : p.host_syncs(d)) {
      for (std::size_t l = 0; l < kLanesPerDevice; ++l) {
        const auto& q = p.queues()[d * kLanesPerDevice + l];
        auto it = std::lower_bound(q.begin(), q.end(), h);
        if (it != q.begin()) edge(*std::prev(it), h);
        auto after = std::upper_bound(q.begin(), q.end(), h);
        if (after != q.end()) edge(h, *after);
      }
    }
  }

  // Kahn order, then descendant sets in reverse order.
  std::vector<std::size_t> indeg(n, 0);
  for (std::size_t u = 0; u < n; ++u) {
    for (auto v : succ[u]) ++indeg[v];
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  for (std::size_t u = 0; u < n; ++u) {
    if (indeg[u] == 0) order.push_back(u);
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (auto v : succ[order[i]]) {
      if (--indeg[v] == 0) order.push_back(v);
    }
  }
  std::vector<detail::Bitset> reach(n, detail::Bitset(n));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    for (auto v : succ[*it]) {
      reach[*it].set(v);
      reach[*it].merge(reach[v]);
    }
  }

  struct Access {
    OpId op;
    Region region;
  };
  std::map<std::uint64_t, std::pair<std::vector<Access>, std::vector<Access>>> by_buffer;
  for (const auto& op : p.ops()) {
    for (const auto& r : op.writes) by_buffer[r.buffer.value].first.push_back({op.id, r});
    for (const auto& r : op.reads) by_buffer[r.buffer.value].second.push_back({op.id, r});
  }

  std::vector<Hazard> hazards;
  for (const auto& [buf, lists] : by_buffer) {
    const auto& [writes, reads] = lists;
    for (const auto& w : writes) {
      for (const auto& r : reads) {
        const auto uw = units.unit_of[w.op];
        const auto ur = units.unit_of[r.op];
        if (uw == ur || p.op(w.op).stream == p.op(r.op).stream) continue;
        if (reach[uw].test(ur) || reach[ur].test(uw)) continue;
        if (auto ov = intersect(w.region, r.region)) {
          hazards.push_back({w.op, r.op, *ov, Hazard::Kind::ReadBeforeWriteCommit});
        }
      }
    }
  }
  std::sort(hazards.begin(), hazards.end(), [](const Hazard& a, const Hazard& b) {
    return std::tie(a.writer, a.reader, a.region.offset) <
           std::tie(b.writer, b.reader, b.region.offset);
  });
  return hazards;
}

namespace detail {

class Interpreter {
 public:
  Interpreter(const Program& p, const SchedulePolicy& policy, const CostModel& cost)
      : p_(p),
        policy_(policy),
        cost_(cost),
        units_(build_units(p)),
        executed_(p.ops().size(), false),
        end_(p.ops().size(), 0.0),
        head_(p.queues().size(), 0),
        ready_(p.queues().size(), 0.0),
        rng_(policy.seed) {
    trace_.buffers = p.buffers();
    if (policy.variant == SchedulePolicy::Variant::Adversarial) {
      for (const auto& h : detect_hazards(p)) {
        readers_of_[h.writer].push_back(h.reader);
        writers_of_[h.reader].push_back(h.writer);
      }
    }
  }

  Trace run() {
    std::size_t remaining = p_.ops().size();
    while (remaining > 0) {
      auto candidates = eligible_units();
      if (candidates.empty()) report_deadlock();
      const std::size_t unit = choose(candidates);
      execute(unit);
      remaining -= units_.members[unit].size();
    }
    for (const auto& e : trace_.entries) trace_.makespan = std::max(trace_.makespan, e.end);
    return std::move(trace_);
  }

 private:
  OpId head_op(std::size_t queue) const {
    const auto& q = p_.queues()[queue];
    return head_[queue] < q.size() ? q[head_[queue]] : kNone;
  }

  bool at_head(OpId id) const { return head_op(p_.op(id).stream.index()) == id; }

  bool host_syncs_cleared(const StreamOp& op) const {
    for (OpId h : p_.host_syncs(op.stream.device.global)) {
      if (h < op.id && !executed_[h]) return false;
    }
    return true;
  }

  bool prior_device_ops_done(const StreamOp& op) const {
    const std::size_t base = op.stream.device.global * kLanesPerDevice;
    for (std::size_t l = 0; l < kLanesPerDevice; ++l) {
      const OpId h = head_op(base + l);
      if (h != kNone && h < op.id) return false;
    }
    return true;
  }

  bool op_ready(OpId id) const {
    const auto& op = p_.op(id);
    if (!at_head(id) || !host_syncs_cleared(op)) return false;
    if (op.kind == OpKind::EventWait) {
      const auto rec = p_.event(*op.event).recorded_by;
      return rec && executed_[*rec];
    }
    if (op.kind == OpKind::HostSync) return prior_device_ops_done(op);
    return true;
  }

  std::vector<std::size_t> eligible_units() const {
    std::set<std::size_t> out;
    for (std::size_t q = 0; q < p_.queues().size(); ++q) {
      const OpId h = head_op(q);
      if (h == kNone) continue;
      const auto unit = units_.unit_of[h];
      if (out.count(unit)) continue;
      const auto& members = units_.members[unit];
      if (std::all_of(members.begin(), members.end(), [&](OpId m) { return op_ready(m); })) {
        out.insert(unit);
      }
    }
    // Units are numbered in order of their lowest op id, so set order is program order.
    return {out.begin(), out.end()};
  }

  bool pending_partner(const std::map<OpId, std::vector<OpId>>& table, std::size_t unit) const {
    for (OpId m : units_.members[unit]) {
      auto it = table.find(m);
      if (it == table.end()) continue;
      for (OpId other : it->second) {
        if (!executed_[other]) return true;
      }
    }
    return false;
  }

  std::size_t choose(const std::vector<std::size_t>& candidates) {
    switch (policy_.variant) {
      case SchedulePolicy::Variant::ProgramOrder:
        return candidates.front();
      case SchedulePolicy::Variant::RandomSeeded:
        return candidates[rng_() % candidates.size()];
      case SchedulePolicy::Variant::Adversarial: {
        // Racing readers first, ordinary ops next, writers with unread racing readers last.
        for (auto u : candidates) {
          if (pending_partner(writers_of_, u)) return u;
        }
        for (auto u : candidates) {
          if (!pending_partner(readers_of_, u)) return u;
        }
        return candidates.front();
      }
    }
    return candidates.front();
  }

  double duration(const StreamOp& op) const {
    switch (op.kind) {
      case OpKind::Compute:
        return op.compute_passes * cost_.compute_time_per_layer_pass +
               memcpy_time(op.payload_bytes, cost_);
      case OpKind::MemcpyD2D:
        return memcpy_time(op.payload_bytes, cost_);
      case OpKind::AllGather:
      case OpKind::ReduceScatter:
      case OpKind::AllToAll: {
        const auto& info = p_.collectives()[*op.collective];
        return collective_time(info.kind, info.group, info.payload_bytes, cost_);
      }
      case OpKind::EventRecord:
        return 0.0;
      case OpKind::EventWait:
      case OpKind::HostSync:
        return cost_.event_sync_latency;
    }
    return 0.0;
  }

  double earliest_start(const StreamOp& op) const {
    double t = ready_[op.stream.index()];
    for (OpId h : p_.host_syncs(op.stream.device.global)) {
      if (h < op.id) t = std::max(t, end_[h]);
    }
    if (op.kind == OpKind::EventWait) {
      t = std::max(t, end_[*p_.event(*op.event).recorded_by]);
    }
    if (op.kind == OpKind::HostSync) {
      const std::size_t base = op.stream.device.global * kLanesPerDevice;
      for (std::size_t l = 0; l < kLanesPerDevice; ++l) t = std::max(t, ready_[base + l]);
    }
    // A read that observes a committed write cannot start before that write ended.
    for (const auto& r : op.reads) {
      auto it = commits_.find(r.buffer.value);
      if (it == commits_.end()) continue;
      for (const auto& [region, end] : it->second) {
        if (overlaps(region, r)) t = std::max(t, end);
      }
    }
    return t;
  }

  void execute(std::size_t unit) {
    const auto& members = units_.members[unit];
    double start = 0.0;
    for (OpId m : members) start = std::max(start, earliest_start(p_.op(m)));
    const auto& first = p_.op(members.front());
    const double end = start + duration(first);

    if (first.collective) {
      const auto& info = p_.collectives()[*first.collective];
      if (info.action) info.action(trace_.buffers);
      trace_.volume[{link_class(info.group), info.tag}] +=
          collective_wire_bytes(info.group, info.payload_bytes);
    } else if (first.action) {
      first.action(trace_.buffers);
    }

    for (OpId m : members) {
      const auto& op = p_.op(m);
      for (const auto& w : op.writes) {
        trace_.buffers.note_write(w);
        commits_[w.buffer.value].emplace_back(w, end);
      }
      executed_[m] = true;
      end_[m] = end;
      ready_[op.stream.index()] = end;
      ++head_[op.stream.index()];
      trace_.entries.push_back({m, start, end});
    }
  }

  std::string describe(OpId id) const {
    const auto& op = p_.op(id);
    std::ostringstream os;
    os << "op " << id << " (" << to_string(op.kind) << " on device " << op.stream.device.global
       << "/" << to_string(op.stream.lane);
    if (op.event) os << ", event " << *op.event;
    os << ")";
    return os.str();
  }

  // Ops that block `id` from running, expressed as the stream heads that must move first.
  std::vector<OpId> blockers(OpId id) const {
    std::vector<OpId> out;
    const auto& op = p_.op(id);
    for (OpId h : p_.host_syncs(op.stream.device.global)) {
      if (h < op.id && !executed_[h]) out.push_back(head_op(p_.op(h).stream.index()));
    }
    if (op.collective) {
      for (OpId m : p_.collectives()[*op.collective].members) {
        if (!at_head(m)) out.push_back(head_op(p_.op(m).stream.index()));
      }
    }
    if (op.kind == OpKind::EventWait) {
      if (auto rec = p_.event(*op.event).recorded_by; rec && !executed_[*rec]) {
        out.push_back(head_op(p_.op(*rec).stream.index()));
      }
    }
    if (op.kind == OpKind::HostSync) {
      const std::size_t base = op.stream.device.global * kLanesPerDevice;
      for (std::size_t l = 0; l < kLanesPerDevice; ++l) {
        const OpId h = head_op(base + l);
        if (h != kNone && h < op.id) out.push_back(h);
      }
    }
    return out;
  }

  [[noreturn]] void report_deadlock() const {
    std::vector<OpId> heads;
    for (std::size_t q = 0; q < p_.queues().size(); ++q) {
      if (head_op(q) != kNone) heads.push_back(head_op(q));
    }
    for (OpId h : heads) {
      const auto& op = p_.op(h);
      if (op.kind == OpKind::EventWait && !p_.event(*op.event).recorded_by) {
        throw DeadlockError("deadlock: " + describe(h) + " waits on event " +
                                std::to_string(*op.event) + " which is never recorded",
                            {});
      }
    }
    // Depth-first search over blocker edges for a cycle.
    std::map<OpId, int> color;  // 1 = on stack, 2 = done
    std::vector<OpId> stack;
    std::function<std::optional<std::vector<OpId>>(OpId)> dfs =
        [&](OpId u) -> std::optional<std::vector<OpId>> {
      color[u] = 1;
      stack.push_back(u);
      for (OpId v : blockers(u)) {
        if (v == kNone || v == u) continue;
        if (color[v] == 1) {
          auto it = std::find(stack.begin(), stack.end(), v);
          return std::vector<OpId>(it, stack.end());
        }
        if (color[v] == 0) {
          if (auto c = dfs(v)) return c;
        }
      }
      stack.pop_back();
      color[u] = 2;
      return std::nullopt;
    };
    for (OpId h : heads) {
      if (color[h] != 0) continue;
      if (auto cycle = dfs(h)) {
        std::string msg = "deadlock: wait cycle";
        for (OpId c : *cycle) msg += " -> " + describe(c);
        throw DeadlockError(msg, *cycle);
      }
    }
    std::string msg = "deadlock: no runnable op; pending";
    for (OpId h : heads) msg += " " + describe(h);
    throw DeadlockError(msg, heads);
  }

  static constexpr OpId kNone = static_cast<OpId>(-1);

  const Program& p_;
  SchedulePolicy policy_;
  const CostModel& cost_;
  UnitMap units_;
  std::vector<bool> executed_;
  std::vector<double> end_;
  std::vector<std::size_t> head_;
  std::vector<double> ready_;
  std::map<std::uint64_t, std::vector<std::pair<Region, double>>> commits_;
  std::map<OpId, std::vector<OpId>> readers_of_;  // hazard writer -> racing readers
  std::map<OpId, std::vector<OpId>> writers_of_;  // hazard reader -> racing writers
  std::mt19937_64 rng_;
  Trace trace_;
};

}  // namespace detail

/// Executes `program` to completion. Deterministic for a fixed (program, policy, cost).
inline Trace run(const Program& program, const SchedulePolicy& policy, const CostModel& cost) {
  return detail::Interpreter(program, policy, cost).run();
}

/// Bytes attributed to one op in trace exports: what this rank sends for collectives,
/// bytes moved for copies.
inline double op_bytes(const Program& p, const StreamOp& op) {
  if (op.collective) {
    const auto& info = p.collectives()[*op.collective];
    return (static_cast<double>(info.group.size()) - 1.0) * info.payload_bytes;
  }
  return op.kind == OpKind::MemcpyD2D ? op.payload_bytes : 0.0;
}

/// One JSON object per executed op, in execution order.
inline void write_trace_jsonl(std::ostream& os, const Program& p, const Trace& trace,
                              std::optional<std::size_t> step = std::nullopt) {
  for (const auto& e : trace.entries) {
    const auto& op = p.op(e.op);
    nlohmann::ordered_json j;
    if (step) j["step"] = *step;
    j["id"] = op.id;
    j["device"] = op.stream.device.global;
    j["lane"] = to_string(op.stream.lane);
    j["kind"] = to_string(op.kind);
    j["start_s"] = e.start;
    j["end_s"] = e.end;
    j["bytes"] = op_bytes(p, op);
    if (!op.tag.empty()) j["tag"] = op.tag;
    os << j.dump() << '\n';
  }
}

}  // namespace hpz
