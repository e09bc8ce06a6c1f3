// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "hpzsim/numerics.hpp"

namespace {

using hpz::Buffer;
using hpz::BufferId;
using hpz::GarbagePattern;

// Largest reconstruction error the rounding bound allows for element i of block b. The
// float32 store of min + code * scale adds at most half an ulp of the reconstructed value.
double allowed_error(const hpz::QuantizedBuffer& q, std::size_t i, float reconstructed) {
  const std::size_t b = i / q.block;
  const double ulp = std::nextafter(std::fabs(reconstructed), std::numeric_limits<float>::infinity()) -
                     std::fabs(reconstructed);
  return q.scales[b] / 2.0 + ulp / 2.0 + 1e-12;
}

std::vector<float> random_values(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<float> span(1e-3F, 1e3F);
  std::uniform_real_distribution<float> center(-100.0F, 100.0F);
  const float c = center(rng);
  const float w = span(rng);
  std::uniform_real_distribution<float> d(c - w, c + w);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

TEST(AllocUninitialized, NanFillFillsEveryElement) {
  const auto b = hpz::alloc_uninitialized(BufferId{0}, 4, GarbagePattern::nan_fill(), 0);
  ASSERT_EQ(b.len(), 4U);
  EXPECT_FALSE(b.initialized);
  for (float v : b.values) EXPECT_TRUE(std::isnan(v));
}

TEST(AllocUninitialized, SeededNoiseIsDeterministic) {
  const auto a = hpz::alloc_uninitialized(BufferId{3}, 3, GarbagePattern::seeded_noise(1e6F), 7);
  const auto b = hpz::alloc_uninitialized(BufferId{3}, 3, GarbagePattern::seeded_noise(1e6F), 7);
  EXPECT_EQ(a.values, b.values);
  for (float v : a.values) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LE(std::fabs(v), 1e6F);
  }
  const auto other = hpz::alloc_uninitialized(BufferId{4}, 3, GarbagePattern::seeded_noise(1e6F), 7);
  EXPECT_NE(a.values, other.values);
}

TEST(AllocUninitialized, ZeroLengthIsRejected) {
  EXPECT_THROW(hpz::alloc_uninitialized(BufferId{0}, 0, GarbagePattern::nan_fill(), 0),
               hpz::InvalidArgument);
}

TEST(Quantize, ConstantBlockHasZeroScale) {
  const auto q = hpz::quantize_blockwise(std::vector<float>{2, 2, 2, 2}, 8, 4);
  ASSERT_EQ(q.num_blocks(), 1U);
  EXPECT_EQ(q.scales[0], 0.0F);
  EXPECT_EQ(q.mins[0], 2.0F);
  EXPECT_EQ(q.codes, (std::vector<std::uint8_t>{0, 0, 0, 0}));
}

TEST(Quantize, EndpointsMapToCodeExtremes) {
  const auto q = hpz::quantize_blockwise(std::vector<float>{0.0F, 1.0F}, 8, 2);
  EXPECT_EQ(q.mins[0], 0.0F);
  EXPECT_FLOAT_EQ(q.scales[0], 1.0F / 255.0F);
  EXPECT_EQ(q.codes, (std::vector<std::uint8_t>{0, 255}));
}

TEST(Quantize, NonFiniteInputRaises) {
  const float nan = std::numeric_limits<float>::quiet_NaN();
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_THROW(hpz::quantize_blockwise(std::vector<float>{1.0F, nan}, 8, 2),
               hpz::QuantizationDomainError);
  EXPECT_THROW(hpz::quantize_blockwise(std::vector<float>{-inf, 1.0F}, 4, 64),
               hpz::QuantizationDomainError);
}

TEST(Quantize, UninitializedBufferRaises) {
  const auto b = hpz::alloc_uninitialized(BufferId{0}, 8, GarbagePattern::seeded_noise(1.0F), 1);
  EXPECT_THROW(hpz::quantize_blockwise(b, 8, 4), hpz::UninitializedReadError);
}

TEST(Quantize, RejectsBadParameters) {
  const std::vector<float> v{1, 2, 3};
  EXPECT_THROW(hpz::quantize_blockwise(v, 3, 4), hpz::InvalidArgument);
  EXPECT_THROW(hpz::quantize_blockwise(v, 8, 0), hpz::InvalidArgument);
}

TEST(Dequantize, ConstantAndEndpointRoundTripsAreExact) {
  EXPECT_EQ(hpz::dequantize_blockwise(hpz::quantize_blockwise(std::vector<float>{2, 2}, 8, 2)).values,
            (std::vector<float>{2, 2}));
  const auto d = hpz::dequantize_blockwise(hpz::quantize_blockwise(std::vector<float>{0, 1}, 8, 2));
  EXPECT_EQ(d.values, (std::vector<float>{0, 1}));
  EXPECT_TRUE(d.initialized);
}

TEST(Dequantize, MalformedInputRaises) {
  auto q = hpz::quantize_blockwise(std::vector<float>{0, 1, 2}, 8, 2);
  q.scales.pop_back();
  EXPECT_THROW(hpz::dequantize_blockwise(q), hpz::InvalidArgument);
}

TEST(Quantize, RoundTripBoundOn1024Elements) {
  std::mt19937_64 rng(11);
  const auto v = random_values(rng, 1024);
  const auto q = hpz::quantize_blockwise(v, 8, 256);
  ASSERT_EQ(q.num_blocks(), 4U);
  const auto d = hpz::dequantize_blockwise(q);
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_LE(std::fabs(static_cast<double>(d.values[i]) - v[i]), allowed_error(q, i, d.values[i]))
        << "element " << i;
  }
}

// Both widths, ten thousand buffers of mixed length and block size.
TEST(Quantize, RoundTripBoundOnTenThousandBuffers) {
  std::mt19937_64 rng(2026);
  std::uniform_int_distribution<std::size_t> len(1, 300);
  std::uniform_int_distribution<std::size_t> block(1, 96);
  std::size_t violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int bits = trial % 2 ? 4 : 8;
    const auto v = random_values(rng, len(rng));
    const auto q = hpz::quantize_blockwise(v, bits, block(rng));
    const auto d = hpz::dequantize_blockwise(q);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t b = i / q.block;
      ASSERT_GE(q.scales[b], 0.0F);
      ASSERT_LE(q.codes[i], (1U << bits) - 1U);
      if (std::fabs(static_cast<double>(d.values[i]) - v[i]) > allowed_error(q, i, d.values[i])) {
        ++violations;
      }
    }
  }
  EXPECT_EQ(violations, 0U);
}

TEST(Quantize, CodeMapIsMonotoneWithinBlock) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto v = random_values(rng, 128);
    const auto q = hpz::quantize_blockwise(v, trial % 2 ? 4 : 8, 64);
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t j = (i / 64) * 64; j < std::min<std::size_t>(v.size(), (i / 64 + 1) * 64); ++j) {
        if (v[i] <= v[j]) {
          ASSERT_LE(q.codes[i], q.codes[j]);
        }
      }
    }
  }
}

TEST(Quantize, WireBytesMatchCodesPlusBlockHeaders) {
  const auto q = hpz::quantize_blockwise(std::vector<float>(1000, 1.0F), 4, 64);
  // 1000 codes at half a byte, 16 blocks of (scale, min) floats.
  EXPECT_DOUBLE_EQ(q.wire_bytes(), 500.0 + 16 * 8.0);
  EXPECT_DOUBLE_EQ(hpz::quantized_wire_bytes(1000, 4, 64), q.wire_bytes());
}

TEST(HasNonfinite, Examples) {
  EXPECT_FALSE(hpz::has_nonfinite(std::vector<float>{1.0F, 2.0F}));
  EXPECT_TRUE(hpz::has_nonfinite(std::vector<float>{1.0F, std::numeric_limits<float>::quiet_NaN()}));
  EXPECT_TRUE(hpz::has_nonfinite(std::vector<float>{std::numeric_limits<float>::infinity()}));
  EXPECT_TRUE(hpz::has_nonfinite(
      hpz::alloc_uninitialized(BufferId{0}, 4, GarbagePattern::nan_fill(), 0)));
}

TEST(BufferStore, FullWriteMarksInitialized) {
  hpz::BufferStore st;
  const auto id = st.alloc(4, GarbagePattern::nan_fill(), 0);
  st.note_write({id, 0, 2});
  EXPECT_FALSE(st.at(id).initialized);
  st.note_write({id, 0, 4});
  EXPECT_TRUE(st.at(id).initialized);
  EXPECT_TRUE(st.contains(hpz::Region{id, 2, 2}));
  EXPECT_FALSE(st.contains(hpz::Region{id, 3, 2}));
}

TEST(Region, OverlapAndIntersection) {
  const hpz::Region a{BufferId{1}, 0, 4};
  const hpz::Region b{BufferId{1}, 3, 4};
  const hpz::Region c{BufferId{1}, 4, 4};
  const hpz::Region other{BufferId{2}, 0, 4};
  EXPECT_TRUE(hpz::overlaps(a, b));
  EXPECT_FALSE(hpz::overlaps(a, c));
  EXPECT_FALSE(hpz::overlaps(a, other));
  const auto i = hpz::intersect(a, b);
  ASSERT_TRUE(i);
  EXPECT_EQ(i->offset, 3U);
  EXPECT_EQ(i->len, 1U);
}

}  // namespace
