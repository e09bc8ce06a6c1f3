// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Toy regression workload: a stack of dense layers with tanh between them and a linear
// head, trained against a fixed teacher network. Parameters of layer i are laid out flat
// as W (out x in, row-major) followed by b (out).

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpzsim/errors.hpp"
#include "hpzsim/numerics.hpp"

namespace hpz {

inline std::size_t dense_layer_elems(std::size_t in_dim, std::size_t out_dim) noexcept {
  return in_dim * out_dim + out_dim;
}

inline std::size_t param_count(const std::vector<std::size_t>& dims) noexcept {
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) total += dense_layer_elems(dims[i], dims[i + 1]);
  return total;
}

struct ToyModel {
  std::vector<std::size_t> dims;  // dims[0] inputs, dims.back() outputs
  std::vector<std::vector<float>> params;
  std::uint64_t seed = 0;

  std::size_t num_layers() const noexcept { return dims.size() - 1; }
  std::size_t in_dim(std::size_t layer) const { return dims.at(layer); }
  std::size_t out_dim(std::size_t layer) const { return dims.at(layer + 1); }
  bool has_activation(std::size_t layer) const noexcept { return layer + 1 < num_layers(); }
};

inline void validate_dims(const std::vector<std::size_t>& dims) {
  if (dims.size() < 2) throw InvalidArgument("model needs at least one layer (two dims)");
  for (auto d : dims) {
    if (d == 0) throw InvalidArgument("model dims must be >= 1");
  }
}

/// Weights uniform in [-1, 1) / sqrt(in_dim), biases zero.
inline ToyModel init_model(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  validate_dims(dims);
  ToyModel m{dims, {}, seed};
  std::uint64_t state = seed * 0x2545F4914F6CDD1DULL + 0x1234567ULL;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l];
    const std::size_t out = dims[l + 1];
    std::vector<float> p(dense_layer_elems(in, out), 0.0F);
    const float scale = 1.0F / std::sqrt(static_cast<float>(in));
    for (std::size_t i = 0; i < in * out; ++i) p[i] = scale * detail::unit_noise(state);
    m.params.push_back(std::move(p));
  }
  return m;
}

/// out = act(in * W^T + b), shapes (batch x in) -> (batch x out).
inline void layer_forward(std::span<const float> params, std::span<const float> in,
                          std::size_t batch, std::size_t in_dim, std::size_t out_dim,
                          bool activation, std::span<float> out) {
  const float* w = params.data();
  const float* b = params.data() + in_dim * out_dim;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < in_dim; ++i) {
        acc += static_cast<double>(w[o * in_dim + i]) * in[n * in_dim + i];
      }
      const auto z = static_cast<float>(acc);
      out[n * out_dim + o] = activation ? std::tanh(z) : z;
    }
  }
}

/// Mean squared error over all outputs; writes dL/dy into `dy`.
inline float mse_loss(std::span<const float> y, std::span<const float> target,
                      std::span<float> dy) {
  double sum = 0.0;
  const double inv = 1.0 / static_cast<double>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double diff = static_cast<double>(y[i]) - target[i];
    sum += diff * diff;
    dy[i] = static_cast<float>(2.0 * diff * inv);
  }
  return static_cast<float>(sum * inv);
}

/// Given dz = dL/d(pre-activation) of this layer, writes the parameter gradient into `grad`
/// (first dense_layer_elems entries) and, when `d_in` is given, dL/d(pre-activation) of the
/// previous layer. `in` must then be the previous layer's tanh output.
inline void layer_backward(std::span<const float> params, std::span<const float> in,
                           std::span<const float> dz, std::size_t batch, std::size_t in_dim,
                           std::size_t out_dim, std::span<float> grad,
                           std::optional<std::span<float>> d_in) {
  const float* w = params.data();
  for (std::size_t o = 0; o < out_dim; ++o) {
    double gb = 0.0;
    for (std::size_t i = 0; i < in_dim; ++i) {
      double gw = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        gw += static_cast<double>(dz[n * out_dim + o]) * in[n * in_dim + i];
      }
      grad[o * in_dim + i] = static_cast<float>(gw);
    }
    for (std::size_t n = 0; n < batch; ++n) gb += dz[n * out_dim + o];
    grad[in_dim * out_dim + o] = static_cast<float>(gb);
  }
  if (!d_in) return;
  auto& dprev = *d_in;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < in_dim; ++i) {
      double acc = 0.0;
      for (std::size_t o = 0; o < out_dim; ++o) {
        acc += static_cast<double>(dz[n * out_dim + o]) * w[o * in_dim + i];
      }
      const float h = in[n * in_dim + i];
      dprev[n * in_dim + i] = static_cast<float>(acc * (1.0 - static_cast<double>(h) * h));
    }
  }
}

struct Batch {
  std::size_t size = 0;
  std::vector<float> inputs;   // size x in_dim
  std::vector<float> targets;  // size x out_dim
};

struct ForwardBackwardResult {
  float loss = 0.0F;
  std::vector<std::vector<float>> grads;  // one per layer, dense_layer_elems long
};

/// Whole-model reference path over full parameter buffers. The simulator calls the per-layer
/// pieces from stream ops; this composes the same pieces in one place.
inline ForwardBackwardResult forward_backward(const std::vector<std::size_t>& dims,
                                              const std::vector<std::span<const float>>& params,
                                              const Batch& batch) {
  const std::size_t layers = dims.size() - 1;
  std::vector<std::vector<float>> acts(layers + 1);
  acts[0] = batch.inputs;
  for (std::size_t l = 0; l < layers; ++l) {
    acts[l + 1].resize(batch.size * dims[l + 1]);
    layer_forward(params[l], acts[l], batch.size, dims[l], dims[l + 1], l + 1 < layers,
                  acts[l + 1]);
  }
  ForwardBackwardResult r;
  std::vector<float> dz(acts[layers].size());
  r.loss = mse_loss(acts[layers], batch.targets, dz);
  r.grads.resize(layers);
  for (std::size_t l = layers; l-- > 0;) {
    r.grads[l].resize(dense_layer_elems(dims[l], dims[l + 1]));
    std::vector<float> dprev(l > 0 ? batch.size * dims[l] : 0);
    layer_backward(params[l], acts[l], dz, batch.size, dims[l], dims[l + 1], r.grads[l],
                   l > 0 ? std::optional<std::span<float>>(dprev) : std::nullopt);
    dz = std::move(dprev);
  }
  return r;
}

/// Regression task whose targets come from a fixed teacher network of the same shape, so the
/// loss floor is zero. Each rank trains on its own fixed batch.
struct SyntheticTask {
  std::vector<std::size_t> dims;
  std::uint64_t seed = 0;
  std::size_t batch_size = 16;
  std::size_t tokens_per_step = 4096;
  ToyModel teacher;

  SyntheticTask(std::vector<std::size_t> model_dims, std::uint64_t task_seed,
                std::size_t batch, std::size_t tokens)
      : dims(std::move(model_dims)),
        seed(task_seed),
        batch_size(batch),
        tokens_per_step(tokens),
        teacher(init_model(dims, task_seed ^ 0x7EAC4E5ULL)) {
    if (batch_size == 0) throw InvalidArgument("batch_size must be >= 1");
    // A sharper teacher gives the student a non-trivial function to fit.
    for (auto& p : teacher.params) {
      for (auto& v : p) v *= 2.0F;
    }
  }

  Batch sample(std::size_t rank) const {
    Batch b;
    b.size = batch_size;
    b.inputs.resize(batch_size * dims.front());
    std::uint64_t state = seed * 0x9E3779B97F4A7C15ULL + 0xB0B + rank * 0x100000001B3ULL;
    for (auto& x : b.inputs) x = detail::unit_noise(state);
    std::vector<float> cur = b.inputs;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      std::vector<float> next(batch_size * dims[l + 1]);
      layer_forward(teacher.params[l], cur, batch_size, dims[l], dims[l + 1],
                    l + 2 < dims.size(), next);
      cur = std::move(next);
    }
    b.targets = std::move(cur);
    return b;
  }
};

struct OptimizerConfig {
  enum class Kind { SGD, Adam };
  Kind kind = Kind::SGD;
  float lr = 0.1F;
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float eps = 1e-8F;
};

/// One update over the first `valid` elements; the padding tail is left untouched.
/// `t` is the 1-based step count used for Adam's bias correction.
inline void apply_update(const OptimizerConfig& cfg, std::size_t t, std::span<float> w,
                         std::span<const float> g, std::span<float> m, std::span<float> v,
                         std::size_t valid) {
  if (w.size() != g.size() || valid > w.size()) {
    throw InvalidArgument("optimizer_step: shard/grad length mismatch");
  }
  if (cfg.kind == OptimizerConfig::Kind::SGD) {
    for (std::size_t i = 0; i < valid; ++i) w[i] -= cfg.lr * g[i];
    return;
  }
  if (m.size() != w.size() || v.size() != w.size()) {
    throw InvalidArgument("optimizer_step: moment length mismatch");
  }
  const double c1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(t));
  const double c2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(t));
  for (std::size_t i = 0; i < valid; ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0F - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0F - cfg.beta2) * g[i] * g[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    w[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

/// Optimizer state for one primary shard. Moments exist only for the shard this rank owns.
struct OptimizerState {
  OptimizerConfig config;
  std::vector<float> m;
  std::vector<float> v;
  std::size_t step = 0;

  OptimizerState(OptimizerConfig cfg, std::size_t shard_len)
      : config(cfg), m(shard_len, 0.0F), v(shard_len, 0.0F) {}
};

inline void optimizer_step(OptimizerState& state, std::span<float> shard,
                           std::span<const float> grad, std::size_t valid) {
  if (shard.size() != grad.size() || shard.size() != state.m.size()) {
    throw InvalidArgument("optimizer_step: shard/grad length mismatch");
  }
  ++state.step;
  apply_update(state.config, state.step, shard, grad, state.m, state.v, valid);
}

struct DivergenceVerdict {
  enum class Status { Stable, NaN, Stagnant };
  Status status = Status::Stable;
  std::size_t step = 0;    // NaN: first non-finite step; Stagnant: step the window closed
  std::size_t window = 0;  // Stagnant only
  std::vector<float> losses;

  bool stable() const noexcept { return status == Status::Stable; }
};

inline const char* to_string(DivergenceVerdict::Status s) {
  switch (s) {
    case DivergenceVerdict::Status::Stable: return "stable";
    case DivergenceVerdict::Status::NaN: return "nan";
    case DivergenceVerdict::Status::Stagnant: return "stagnant";
  }
  return "?";
}

/// NaN(step) at the first non-finite loss; Stagnant once `window` consecutive steps pass
/// without a new running minimum; Stable otherwise.
inline DivergenceVerdict classify_divergence(const std::vector<float>& losses, std::size_t window) {
  if (losses.empty()) throw InvalidArgument("classify_divergence: empty loss series");
  DivergenceVerdict v;
  v.losses = losses;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (!std::isfinite(losses[i])) {
      v.status = DivergenceVerdict::Status::NaN;
      v.step = i;
      return v;
    }
  }
  if (window == 0) return v;
  float best = losses[0];
  std::size_t since = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) {
    if (losses[i] < best) {
      best = losses[i];
      since = 0;
    } else if (++since >= window) {
      v.status = DivergenceVerdict::Status::Stagnant;
      v.step = i;
      v.window = window;
      return v;
    }
  }
  return v;
}

}  // namespace hpz
