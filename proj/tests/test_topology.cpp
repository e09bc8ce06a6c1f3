// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>

#include "hpzsim/topology.hpp"

namespace {

using hpz::ClusterTopology;
using hpz::CollectiveKind;
using hpz::CostModel;

ClusterTopology topo(std::size_t nodes, std::size_t dpn) {
  ClusterTopology t;
  t.nodes = nodes;
  t.devices_per_node = dpn;
  return t;
}

TEST(SecondaryGroup, CoversTheRanksNode) {
  const auto t = topo(2, 8);
  const auto g = hpz::secondary_group(hpz::device_rank(9, t), t);
  ASSERT_EQ(g.size(), 8U);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(g.ranks[i].global, 8 + i);
  EXPECT_FALSE(g.spans_nodes);
}

TEST(SecondaryGroup, SingleNodeEqualsWorld) {
  const auto t = topo(1, 8);
  const auto g = hpz::secondary_group(hpz::device_rank(0, t), t);
  const auto w = hpz::world_group(t);
  ASSERT_EQ(g.size(), w.size());
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(g.ranks[i], w.ranks[i]);
}

TEST(SecondaryGroup, OneDevicePerNodeIsSingleton) {
  const auto t = topo(4, 1);
  const auto g = hpz::secondary_group(hpz::device_rank(3, t), t);
  ASSERT_EQ(g.size(), 1U);
  EXPECT_EQ(g.ranks[0].global, 3U);
}

TEST(SecondaryGroup, PartitionsTheWorldIntoNodes) {
  for (std::size_t nodes : {1, 2, 3, 5}) {
    for (std::size_t dpn : {1, 2, 8}) {
      const auto t = topo(nodes, dpn);
      std::set<std::set<std::size_t>> groups;
      std::set<std::size_t> covered;
      for (std::size_t r = 0; r < t.world_size(); ++r) {
        std::set<std::size_t> members;
        for (const auto& m : hpz::secondary_group(hpz::device_rank(r, t), t).ranks) {
          members.insert(m.global);
        }
        groups.insert(members);
      }
      EXPECT_EQ(groups.size(), nodes);
      for (const auto& g : groups) {
        for (auto r : g) EXPECT_TRUE(covered.insert(r).second) << "rank " << r << " twice";
      }
      EXPECT_EQ(covered.size(), t.world_size());
    }
  }
}

TEST(DeviceRank, Decomposition) {
  const auto t = topo(3, 4);
  for (std::size_t g = 0; g < t.world_size(); ++g) {
    const auto r = hpz::device_rank(g, t);
    EXPECT_EQ(r.global, r.node * 4 + r.local);
    EXPECT_LT(r.local, 4U);
  }
  EXPECT_THROW(hpz::device_rank(12, t), hpz::InvalidArgument);
}

TEST(MakeGroup, ValidatesMembers) {
  const auto t = topo(2, 2);
  EXPECT_THROW(hpz::make_group({}), hpz::InvalidArgument);
  EXPECT_THROW(hpz::make_group({hpz::device_rank(1, t), hpz::device_rank(1, t)}),
               hpz::InvalidArgument);
  EXPECT_FALSE(hpz::make_group({hpz::device_rank(0, t), hpz::device_rank(1, t)}).spans_nodes);
  EXPECT_TRUE(hpz::make_group({hpz::device_rank(1, t), hpz::device_rank(2, t)}).spans_nodes);
}

TEST(Topology, ValidateRejectsNonsense) {
  auto t = topo(0, 8);
  EXPECT_THROW(t.validate(), hpz::ConfigError);
  t = topo(1, 1);
  t.inter_bw = 0;
  EXPECT_THROW(t.validate(), hpz::ConfigError);
  t = topo(1, 1);
  t.intra_latency = -1;
  EXPECT_THROW(t.validate(), hpz::ConfigError);
}

TEST(CollectiveTime, SelfCollectiveIsFree) {
  const auto t = topo(1, 1);
  CostModel m{t};
  EXPECT_EQ(hpz::collective_time(CollectiveKind::AllGather, hpz::world_group(t), 1e9, m), 0.0);
}

TEST(CollectiveTime, IntraRingByHand) {
  auto t = topo(1, 8);
  t.intra_latency = 0.0;
  CostModel m{t};
  // 8 ranks x 125 MB = 1 GB total, 7/8 of it crosses each link at 600 GB/s.
  const double expected = 7.0 / 8.0 * 1e9 / 600e9;
  EXPECT_NEAR(hpz::collective_time(CollectiveKind::AllGather, hpz::world_group(t), 125e6, m),
              expected, 1e-15);
  EXPECT_NEAR(expected, 1.458e-3, 1e-6);
}

TEST(CollectiveTime, SpanningRingIsSlower) {
  const auto intra_t = topo(1, 8);
  const auto inter_t = topo(2, 8);
  const double intra = hpz::collective_time(CollectiveKind::AllGather,
                                            hpz::world_group(intra_t), 125e6, CostModel{intra_t});
  const double inter = hpz::collective_time(CollectiveKind::AllGather,
                                            hpz::world_group(inter_t), 125e6, CostModel{inter_t});
  EXPECT_GT(inter, intra);
  // Hand evaluation with the NIC shared by 8 local ranks.
  const double bw = 1.5625e9 / 8;
  EXPECT_NEAR(inter, 15 * 2e-5 + 15.0 / 16.0 * 16 * 125e6 / bw, 1e-9);
}

TEST(CollectiveTime, SameSizeGroupsIntraNeverSlower) {
  const auto t = topo(2, 8);
  CostModel m{t};
  std::vector<hpz::DeviceRank> same_node, split;
  for (std::size_t i = 0; i < 4; ++i) same_node.push_back(hpz::device_rank(i, t));
  for (std::size_t i = 0; i < 4; ++i) split.push_back(hpz::device_rank(i * 4, t));
  for (double payload : {0.0, 1.0, 1e3, 1e6, 1e9}) {
    EXPECT_LE(hpz::collective_time(CollectiveKind::AllToAll, hpz::make_group(same_node), payload, m),
              hpz::collective_time(CollectiveKind::AllToAll, hpz::make_group(split), payload, m));
  }
}

TEST(CollectiveTime, MonotoneInPayloadAndLatency) {
  auto t = topo(2, 4);
  const auto g = hpz::world_group(t);
  double prev = -1.0;
  for (double payload = 0; payload <= 1e8; payload += 1e7) {
    const double now = hpz::collective_time(CollectiveKind::ReduceScatter, g, payload, CostModel{t});
    EXPECT_GE(now, prev);
    prev = now;
  }
  prev = -1.0;
  for (double lat = 0; lat <= 1e-3; lat += 1e-4) {
    t.inter_latency = lat;
    const double now = hpz::collective_time(CollectiveKind::ReduceScatter, g, 1e6, CostModel{t});
    EXPECT_GE(now, prev);
    prev = now;
  }
}

TEST(CollectiveWireBytes, RingVolume) {
  const auto t = topo(1, 4);
  EXPECT_DOUBLE_EQ(hpz::collective_wire_bytes(hpz::world_group(t), 10.0), 4 * 3 * 10.0);
}

TEST(MemcpyTime, Examples) {
  CostModel m;
  EXPECT_EQ(hpz::memcpy_time(0, m), 0.0);
  EXPECT_DOUBLE_EQ(hpz::memcpy_time(600e9, m), 1.0);
  EXPECT_DOUBLE_EQ(hpz::memcpy_time(2e6, m), 2.0 * hpz::memcpy_time(1e6, m));
}

TEST(CostModel, DefaultsFollowTheTestbed) {
  CostModel m;
  EXPECT_EQ(m.topology.devices_per_node, 8U);
  EXPECT_DOUBLE_EQ(m.topology.intra_bw, 600e9);
  EXPECT_DOUBLE_EQ(m.topology.inter_bw, 12.5e9 / 8);
  EXPECT_DOUBLE_EQ(m.effective_inter_bw(), 12.5e9 / 8 / 8);
  EXPECT_DOUBLE_EQ(CostModel::bytes_per_element(4), 0.5);
}

}  // namespace
