// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace hpz {

/// Malformed argument to a library call (zero lengths, bad bit widths, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Quantizer was handed a non-finite value. NaN must surface, never be clamped.
class QuantizationDomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Read of a buffer that was never fully written.
class UninitializedReadError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A program references buffers, events or streams that do not exist.
class InvalidProgramError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Layer lifecycle violated (gather without a shard, double repartition, ...).
class LifecycleError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Configuration key missing, unknown or out of range.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The engine reached quiescence with ops still pending.
class DeadlockError : public std::runtime_error {
 public:
  DeadlockError(const std::string& what, std::vector<std::size_t> cycle)
      : std::runtime_error(what), cycle_(std::move(cycle)) {}

  /// Op ids forming the wait cycle, empty when the blocker is an event that is never recorded.
  const std::vector<std::size_t>& cycle() const noexcept { return cycle_; }

 private:
  std::vector<std::size_t> cycle_;
};

}  // namespace hpz
