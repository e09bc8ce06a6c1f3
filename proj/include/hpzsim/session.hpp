// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Multi-step training driver. Each step is emitted as a fresh stream program, executed, and
// the persistent per-rank state (primary shards and optimizer moments) is read back out of
// the final buffer states for the next step.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <vector>

#include "hpzsim/config.hpp"
#include "hpzsim/stream_engine.hpp"
#include "hpzsim/trainer.hpp"
#include "hpzsim/zeropp.hpp"

namespace hpz {

struct StepRecord {
  double loss = 0.0;
  double step_time_s = 0.0;
  double inter_bytes = 0.0;
  double intra_bytes = 0.0;
  double bwd_gather_inter_bytes = 0.0;
};

class TrainingSession {
 public:
  explicit TrainingSession(RunConfig cfg)
      : cfg_(std::move(cfg)),
        spec_(make_model_spec(cfg_.dims, cfg_.cost.topology, cfg_.layer_elems)),
        task_(cfg_.dims, cfg_.task_seed, cfg_.batch_size, cfg_.tokens_per_step) {
    cfg_.validate();
    const auto model = init_model(cfg_.dims, cfg_.model_seed);
    ranks_ = make_rank_contexts(spec_, cfg_.scheme, model, task_, cfg_.cost.topology);
  }

  const RunConfig& config() const noexcept { return cfg_; }
  const ModelSpec& spec() const noexcept { return spec_; }
  const std::vector<RankContext>& ranks() const noexcept { return ranks_; }
  std::size_t steps_done() const noexcept { return step_; }

  /// Builds the program the next step would run, without running it.
  StepProgram next_program() const {
    StepOptions opts;
    opts.garbage = cfg_.garbage;
    opts.garbage_seed = garbage_seed(step_);
    opts.optimizer = cfg_.optimizer;
    opts.optimizer_step = step_ + 1;
    return build_step_program(spec_, cfg_.cost.topology, ranks_, opts);
  }

  /// Runs one step under `policy`. Writes the executed schedule as JSON lines when asked.
  StepRecord step(const SchedulePolicy& policy, std::ostream* trace_out = nullptr) {
    const auto sp = next_program();
    const Trace trace = run(sp.program, policy, cfg_.cost);
    if (trace_out) write_trace_jsonl(*trace_out, sp.program, trace, step_);

    StepRecord rec;
    double loss = 0.0;
    for (std::size_t r = 0; r < ranks_.size(); ++r) {
      loss += trace.buffers.at(sp.layout.loss[r]).values[0];
      for (std::size_t l = 0; l < spec_.layers.size(); ++l) {
        ranks_[r].primary[l] = trace.buffers.at(sp.layout.primary[r][l]).values;
        ranks_[r].adam_m[l] = trace.buffers.at(sp.layout.adam_m[r][l]).values;
        ranks_[r].adam_v[l] = trace.buffers.at(sp.layout.adam_v[r][l]).values;
      }
    }
    rec.loss = loss / static_cast<double>(ranks_.size());
    rec.step_time_s = trace.makespan;
    rec.inter_bytes = trace.bytes(LinkClass::Inter);
    rec.intra_bytes = trace.bytes(LinkClass::Intra);
    rec.bwd_gather_inter_bytes = trace.bytes(LinkClass::Inter, "bwd_gather");
    ++step_;
    return rec;
  }

  /// Full parameters of `layer` reassembled from the primary shards.
  std::vector<float> gather_layer(std::size_t layer) const {
    std::vector<float> out;
    for (const auto& r : ranks_) {
      out.insert(out.end(), r.primary[layer].begin(), r.primary[layer].end());
    }
    out.resize(spec_.layers[layer].elems);
    return out;
  }

 private:
  std::uint64_t garbage_seed(std::size_t step) const noexcept {
    std::uint64_t s = cfg_.seed ^ (0xA5A5A5A5ULL + step * 0x9E3779B97F4A7C15ULL);
    return detail::splitmix64(s);
  }

  RunConfig cfg_;
  ModelSpec spec_;
  SyntheticTask task_;
  std::vector<RankContext> ranks_;
  std::size_t step_ = 0;
};

}  // namespace hpz
