// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Flat float32 buffers with observable allocation garbage, plus the blockwise
// asymmetric quantizer used for quantized weight gathers and gradient exchange.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpzsim/errors.hpp"

namespace hpz {

struct BufferId {
  std::uint64_t value = 0;
  friend constexpr auto operator<=>(BufferId, BufferId) = default;
};

struct GarbagePattern {
  enum class Kind { NanFill, SeededNoise };
  Kind kind = Kind::NanFill;
  float magnitude = 0.0F;

  static constexpr GarbagePattern nan_fill() { return {Kind::NanFill, 0.0F}; }
  static constexpr GarbagePattern seeded_noise(float magnitude) {
    return {Kind::SeededNoise, magnitude};
  }
};

struct Buffer {
  BufferId id;
  std::vector<float> values;
  bool initialized = false;

  std::size_t len() const noexcept { return values.size(); }
  std::span<float> span() noexcept { return values; }
  std::span<const float> span() const noexcept { return values; }
};

struct Region {
  BufferId buffer;
  std::size_t offset = 0;
  std::size_t len = 0;

  std::size_t end() const noexcept { return offset + len; }
  friend bool operator==(const Region&, const Region&) = default;
};

inline bool overlaps(const Region& a, const Region& b) noexcept {
  return a.buffer == b.buffer && a.len > 0 && b.len > 0 && a.offset < b.end() &&
         b.offset < a.end();
}

inline std::optional<Region> intersect(const Region& a, const Region& b) noexcept {
  if (!overlaps(a, b)) return std::nullopt;
  const std::size_t lo = std::max(a.offset, b.offset);
  const std::size_t hi = std::min(a.end(), b.end());
  return Region{a.buffer, lo, hi - lo};
}

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Uniform in [-1, 1), identical on every platform.
inline float unit_noise(std::uint64_t& state) noexcept {
  const auto bits = splitmix64(state) >> 40;  // 24 random bits
  const double u = static_cast<double>(bits) / static_cast<double>(1ULL << 24);
  return static_cast<float>(2.0 * u - 1.0);
}

}  // namespace detail

/// Allocates a buffer whose contents are the garbage pattern, as an uninitialized device
/// allocation would be. SeededNoise contents depend only on (seed, id).
inline Buffer alloc_uninitialized(BufferId id, std::size_t len, GarbagePattern pattern,
                                  std::uint64_t seed) {
  if (len == 0) throw InvalidArgument("alloc_uninitialized: len must be > 0");
  Buffer buf{id, std::vector<float>(len), false};
  if (pattern.kind == GarbagePattern::Kind::NanFill) {
    std::fill(buf.values.begin(), buf.values.end(), std::numeric_limits<float>::quiet_NaN());
  } else {
    std::uint64_t state = seed ^ (id.value * 0xD1B54A32D192ED03ULL);
    for (auto& v : buf.values) v = pattern.magnitude * detail::unit_noise(state);
  }
  return buf;
}

inline bool has_nonfinite(std::span<const float> values) noexcept {
  return std::any_of(values.begin(), values.end(), [](float v) { return !std::isfinite(v); });
}

inline bool has_nonfinite(const Buffer& buf) noexcept { return has_nonfinite(buf.span()); }

struct QuantizedBuffer {
  int bits = 8;
  std::size_t block = 256;
  std::vector<std::uint8_t> codes;  // one code per element, low `bits` bits used
  std::vector<float> scales;
  std::vector<float> mins;
  std::size_t original_len = 0;

  std::size_t num_blocks() const noexcept { return scales.size(); }

  /// Bytes on the wire: packed codes plus a float scale and min per block.
  double wire_bytes() const noexcept {
    return static_cast<double>(original_len) * bits / 8.0 +
           static_cast<double>(num_blocks()) * 2.0 * sizeof(float);
  }
};

inline std::size_t num_quant_blocks(std::size_t len, std::size_t block) noexcept {
  return (len + block - 1) / block;
}

/// Wire size of a quantized payload of `len` elements, without quantizing anything.
inline double quantized_wire_bytes(double len, int bits, std::size_t block) noexcept {
  return len * bits / 8.0 + std::ceil(len / static_cast<double>(block)) * 2.0 * sizeof(float);
}

inline QuantizedBuffer quantize_blockwise(std::span<const float> values, int bits,
                                          std::size_t block) {
  if (bits != 4 && bits != 8) throw InvalidArgument("quantize_blockwise: bits must be 4 or 8");
  if (block == 0) throw InvalidArgument("quantize_blockwise: block must be >= 1");
  const double levels = static_cast<double>((1U << bits) - 1U);

  QuantizedBuffer q;
  q.bits = bits;
  q.block = block;
  q.original_len = values.size();
  q.codes.resize(values.size());
  const std::size_t nblocks = num_quant_blocks(values.size(), block);
  q.scales.resize(nblocks);
  q.mins.resize(nblocks);

  for (std::size_t b = 0; b < nblocks; ++b) {
    const std::size_t lo = b * block;
    const std::size_t hi = std::min(values.size(), lo + block);
    float mn = values[lo];
    float mx = values[lo];
    for (std::size_t i = lo; i < hi; ++i) {
      const float v = values[i];
      if (!std::isfinite(v)) {
        throw QuantizationDomainError("quantize_blockwise: non-finite value at index " +
                                      std::to_string(i));
      }
      mn = std::min(mn, v);
      mx = std::max(mx, v);
    }
    const float scale = static_cast<float>((static_cast<double>(mx) - mn) / levels);
    q.mins[b] = mn;
    q.scales[b] = scale;
    for (std::size_t i = lo; i < hi; ++i) {
      if (scale > 0.0F) {
        const double code = std::nearbyint((static_cast<double>(values[i]) - mn) / scale);
        q.codes[i] = static_cast<std::uint8_t>(std::clamp(code, 0.0, levels));
      } else {
        q.codes[i] = 0;
      }
    }
  }
  return q;
}

inline QuantizedBuffer quantize_blockwise(const Buffer& buf, int bits, std::size_t block) {
  if (!buf.initialized) {
    throw UninitializedReadError("quantize_blockwise: buffer " + std::to_string(buf.id.value) +
                                 " was never written");
  }
  return quantize_blockwise(buf.span(), bits, block);
}

inline void dequantize_into(const QuantizedBuffer& q, std::span<float> out) {
  if (out.size() != q.original_len || q.codes.size() != q.original_len || q.block == 0 ||
      q.scales.size() != num_quant_blocks(q.original_len, q.block) ||
      q.mins.size() != q.scales.size()) {
    throw InvalidArgument("dequantize_blockwise: malformed quantized buffer");
  }
  for (std::size_t i = 0; i < q.original_len; ++i) {
    const std::size_t b = i / q.block;
    out[i] = static_cast<float>(static_cast<double>(q.mins[b]) +
                                static_cast<double>(q.codes[i]) * q.scales[b]);
  }
}

inline Buffer dequantize_blockwise(const QuantizedBuffer& q, BufferId id = {}) {
  Buffer out{id, std::vector<float>(q.original_len), true};
  dequantize_into(q, out.span());
  return out;
}

/// Owns every buffer of a program. Ids are dense and assigned in allocation order.
class BufferStore {
 public:
  BufferId alloc(std::size_t len, GarbagePattern pattern, std::uint64_t seed) {
    const BufferId id{buffers_.size()};
    buffers_.push_back(alloc_uninitialized(id, len, pattern, seed));
    return id;
  }

  BufferId adopt(std::vector<float> values) {
    if (values.empty()) throw InvalidArgument("BufferStore::adopt: empty buffer");
    const BufferId id{buffers_.size()};
    buffers_.push_back(Buffer{id, std::move(values), true});
    return id;
  }

  bool contains(BufferId id) const noexcept { return id.value < buffers_.size(); }
  bool contains(const Region& r) const noexcept {
    return contains(r.buffer) && r.end() <= buffers_[r.buffer.value].len();
  }

  Buffer& at(BufferId id) {
    if (!contains(id)) throw InvalidArgument("unknown buffer " + std::to_string(id.value));
    return buffers_[id.value];
  }
  const Buffer& at(BufferId id) const {
    if (!contains(id)) throw InvalidArgument("unknown buffer " + std::to_string(id.value));
    return buffers_[id.value];
  }

  std::span<float> view(const Region& r) { return at(r.buffer).span().subspan(r.offset, r.len); }
  std::span<const float> view(const Region& r) const {
    return at(r.buffer).span().subspan(r.offset, r.len);
  }

  /// Marks the buffer initialized when the write covers it entirely.
  void note_write(const Region& r) {
    auto& buf = at(r.buffer);
    if (r.offset == 0 && r.len == buf.len()) buf.initialized = true;
  }

  Region whole(BufferId id) const { return Region{id, 0, at(id).len()}; }

  std::size_t size() const noexcept { return buffers_.size(); }
  const std::vector<Buffer>& buffers() const noexcept { return buffers_; }

 private:
  std::vector<Buffer> buffers_;
};

}  // namespace hpz
