// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Virtual cluster description and the flat-ring communication cost model.

#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "hpzsim/errors.hpp"

namespace hpz {

struct ClusterTopology {
  std::size_t nodes = 2;
  std::size_t devices_per_node = 8;
  double intra_bw = 600e9;      // bytes/s, NVLink class
  double inter_bw = 1.5625e9;   // bytes/s per node NIC (12.5 Gbps)
  double intra_latency = 5e-6;  // s
  double inter_latency = 2e-5;  // s

  std::size_t world_size() const noexcept { return nodes * devices_per_node; }

  void validate() const {
    if (nodes < 1 || devices_per_node < 1) {
      throw ConfigError("topology: nodes and devices_per_node must be >= 1");
    }
    if (!(intra_bw > 0.0) || !(inter_bw > 0.0)) {
      throw ConfigError("topology: intra_bw and inter_bw must be > 0");
    }
    if (intra_latency < 0.0 || inter_latency < 0.0) {
      throw ConfigError("topology: latencies must be >= 0");
    }
  }
};

struct DeviceRank {
  std::size_t global = 0;
  std::size_t node = 0;
  std::size_t local = 0;

  friend bool operator==(const DeviceRank&, const DeviceRank&) = default;
  friend auto operator<=>(const DeviceRank& a, const DeviceRank& b) { return a.global <=> b.global; }
};

inline DeviceRank device_rank(std::size_t global, const ClusterTopology& topo) {
  if (global >= topo.world_size()) {
    throw InvalidArgument("rank " + std::to_string(global) + " outside world of " +
                          std::to_string(topo.world_size()));
  }
  return {global, global / topo.devices_per_node, global % topo.devices_per_node};
}

struct CollectiveGroup {
  std::vector<DeviceRank> ranks;
  bool spans_nodes = false;

  std::size_t size() const noexcept { return ranks.size(); }

  /// Position of `global` inside the group, or size() when absent.
  std::size_t index_of(std::size_t global) const noexcept {
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      if (ranks[i].global == global) return i;
    }
    return ranks.size();
  }
};

inline CollectiveGroup make_group(std::vector<DeviceRank> ranks) {
  if (ranks.empty()) throw InvalidArgument("collective group must be non-empty");
  std::set<std::size_t> seen;
  std::set<std::size_t> nodes;
  for (const auto& r : ranks) {
    if (!seen.insert(r.global).second) {
      throw InvalidArgument("duplicate rank " + std::to_string(r.global) + " in group");
    }
    nodes.insert(r.node);
  }
  return {std::move(ranks), nodes.size() >= 2};
}

/// All P ranks.
inline CollectiveGroup world_group(const ClusterTopology& topo) {
  std::vector<DeviceRank> ranks;
  for (std::size_t g = 0; g < topo.world_size(); ++g) ranks.push_back(device_rank(g, topo));
  return make_group(std::move(ranks));
}

/// The P' ranks sharing `rank`'s node; these hold the node-local secondary copy.
inline CollectiveGroup secondary_group(const DeviceRank& rank, const ClusterTopology& topo) {
  std::vector<DeviceRank> ranks;
  for (std::size_t l = 0; l < topo.devices_per_node; ++l) {
    ranks.push_back(device_rank(rank.node * topo.devices_per_node + l, topo));
  }
  return make_group(std::move(ranks));
}

enum class CollectiveKind { AllGather, ReduceScatter, AllToAll };

enum class LinkClass { Intra, Inter };

inline const char* to_string(LinkClass c) { return c == LinkClass::Intra ? "intra" : "inter"; }

struct CostModel {
  ClusterTopology topology;
  double compute_time_per_layer_pass = 2e-4;  // s per layer per forward or backward pass
  double event_sync_latency = 2e-6;           // s charged to every stream-side event wait

  static double bytes_per_element(int bits) noexcept { return bits / 8.0; }

  void validate() const {
    topology.validate();
    if (compute_time_per_layer_pass < 0.0) {
      throw ConfigError("compute_time_per_layer_pass must be >= 0");
    }
    if (event_sync_latency < 0.0) throw ConfigError("event_sync_latency must be >= 0");
  }

  /// The node NIC is shared by every local rank taking part in a node-spanning ring.
  double effective_inter_bw() const noexcept {
    return topology.inter_bw / static_cast<double>(topology.devices_per_node);
  }
};

inline LinkClass link_class(const CollectiveGroup& group) noexcept {
  return group.spans_nodes ? LinkClass::Inter : LinkClass::Intra;
}

/// Flat ring: (g-1) latency hops plus (g-1)/g of the total volume over the group's link class.
/// The kind does not change the ring cost; it is kept so callers state what they model.
inline double collective_time(CollectiveKind /*kind*/, const CollectiveGroup& group,
                              double payload_bytes_per_rank, const CostModel& model) {
  const auto g = static_cast<double>(group.size());
  if (group.size() <= 1) return 0.0;
  const double latency =
      group.spans_nodes ? model.topology.inter_latency : model.topology.intra_latency;
  const double bw = group.spans_nodes ? model.effective_inter_bw() : model.topology.intra_bw;
  const double total = g * payload_bytes_per_rank;
  return (g - 1.0) * latency + (g - 1.0) / g * total / bw;
}

/// Bytes put on the wire by the whole group for one ring collective.
inline double collective_wire_bytes(const CollectiveGroup& group, double payload_bytes_per_rank) {
  const auto g = static_cast<double>(group.size());
  return g * (g - 1.0) * payload_bytes_per_rank;
}

inline double memcpy_time(double bytes, const CostModel& model) {
  return bytes <= 0.0 ? 0.0 : bytes / model.topology.intra_bw;
}

}  // namespace hpz
