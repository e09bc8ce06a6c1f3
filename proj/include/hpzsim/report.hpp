// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Experiment commands and their report formats. Every report embeds the full configuration
// it was produced from, so it can be fed back in as a config file.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <future>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hpzsim/config.hpp"
#include "hpzsim/session.hpp"

namespace hpz {

using Json = nlohmann::ordered_json;

/// Off and Fixed must always train; Stock only when nothing reorders its racing gather.
inline bool expected_stable(const RunConfig& cfg) {
  return cfg.scheme.hpz != HpzMode::Stock ||
         cfg.policy == SchedulePolicy::Variant::ProgramOrder;
}

inline Json config_json(const RunConfig& cfg) {
  Json j = Json::object();
  for (const auto& [k, v] : to_pairs(cfg)) j[k] = v;
  return j;
}

struct RunReport {
  RunConfig config;
  std::vector<StepRecord> steps;
  DivergenceVerdict verdict;
  std::size_t hazards = 0;
  double tokens_per_sec_per_node = 0.0;
  std::optional<std::string> trace_path;

  bool expected_stable() const { return hpz::expected_stable(config); }
  bool ok() const { return verdict.stable() || !expected_stable(); }
};

struct RunOptions {
  std::ostream* trace = nullptr;
  std::optional<std::string> trace_path;
  bool stop_at_nan = false;  // NaN never recovers, so later steps add nothing to the verdict
};

inline double tokens_per_sec_per_node(const RunConfig& cfg, const std::vector<StepRecord>& steps) {
  if (steps.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : steps) total += s.step_time_s;
  const double mean = total / static_cast<double>(steps.size());
  if (!(mean > 0.0)) return 0.0;
  return static_cast<double>(cfg.tokens_per_step) / mean /
         static_cast<double>(cfg.cost.topology.nodes);
}

inline RunReport cmd_run(const RunConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  RunReport rep;
  rep.config = cfg;
  rep.trace_path = opts.trace_path;
  TrainingSession session(cfg);
  rep.hazards = detect_hazards(session.next_program().program).size();
  std::vector<float> losses;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto rec = session.step(cfg.schedule(cfg.seed), opts.trace);
    rep.steps.push_back(rec);
    losses.push_back(static_cast<float>(rec.loss));
    if (opts.stop_at_nan && !std::isfinite(rec.loss)) break;
  }
  rep.verdict = classify_divergence(losses, cfg.window);
  rep.tokens_per_sec_per_node = tokens_per_sec_per_node(cfg, rep.steps);
  return rep;
}

inline Json verdict_json(const DivergenceVerdict& v) {
  Json j;
  j["status"] = to_string(v.status);
  if (v.status != DivergenceVerdict::Status::Stable) j["step"] = v.step;
  if (v.status == DivergenceVerdict::Status::Stagnant) j["window"] = v.window;
  return j;
}

inline Json to_json(const RunReport& r) {
  Json j;
  j["command"] = "run";
  j["config"] = config_json(r.config);
  j["verdict"] = verdict_json(r.verdict);
  j["expected_stable"] = r.expected_stable();
  j["hazards"] = r.hazards;
  j["tokens_per_sec_per_node"] = r.tokens_per_sec_per_node;
  double inter = 0.0, intra = 0.0, bwd_inter = 0.0;
  for (const auto& s : r.steps) {
    inter += s.inter_bytes;
    intra += s.intra_bytes;
    bwd_inter += s.bwd_gather_inter_bytes;
  }
  j["inter_bytes_total"] = inter;
  j["intra_bytes_total"] = intra;
  j["bwd_gather_inter_bytes_total"] = bwd_inter;
  j["trace"] = r.trace_path ? Json(*r.trace_path) : Json(nullptr);
  Json steps = Json::array();
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    Json e;
    e["step"] = i;
    e["loss"] = std::isfinite(s.loss) ? Json(s.loss) : Json(nullptr);
    e["step_time_s"] = s.step_time_s;
    e["inter_bytes"] = s.inter_bytes;
    e["intra_bytes"] = s.intra_bytes;
    steps.push_back(std::move(e));
  }
  j["steps"] = std::move(steps);
  return j;
}

namespace detail {

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  return format_double(v);
}

}  // namespace detail

/// `step,loss,step_time_s,inter_bytes,intra_bytes`
inline std::string loss_csv(const RunReport& r) {
  std::ostringstream os;
  os << "step,loss,step_time_s,inter_bytes,intra_bytes\n";
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    const auto& s = r.steps[i];
    os << i << ',' << detail::fmt(s.loss) << ',' << detail::fmt(s.step_time_s) << ','
       << detail::fmt(s.inter_bytes) << ',' << detail::fmt(s.intra_bytes) << '\n';
  }
  return os.str();
}

/// Runs independent configurations concurrently and returns results in input order.
template <typename F>
auto run_all(const std::vector<RunConfig>& cfgs, F&& fn) {
  using R = decltype(fn(cfgs.front()));
  std::vector<std::future<R>> futures;
  futures.reserve(cfgs.size());
  for (const auto& c : cfgs) futures.push_back(std::async(std::launch::async, fn, c));
  std::vector<R> out;
  out.reserve(cfgs.size());
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

/// Same depth and input/output widths as the base model, hidden layers resized to `width`.
inline std::vector<std::size_t> resize_hidden(const std::vector<std::size_t>& dims,
                                              std::size_t width) {
  std::vector<std::size_t> out = dims;
  for (std::size_t i = 1; i + 1 < out.size(); ++i) out[i] = width;
  return out;
}

inline std::string dims_label(const std::vector<std::size_t>& dims) {
  return detail::join(dims);
}

// ---------------------------------------------------------------------------------------
// Stability matrix

struct StabilityCell {
  std::vector<std::size_t> dims;
  HpzMode mode = HpzMode::Off;
  DivergenceVerdict verdict;
  std::size_t hazards = 0;
  bool expected_stable = true;
};

struct StabilityReport {
  RunConfig base;
  std::vector<StabilityCell> cells;  // row-major: model size, then Off/Stock/Fixed

  bool ok() const {
    for (const auto& c : cells) {
      if (c.expected_stable && !c.verdict.stable()) return false;
    }
    return true;
  }
  const StabilityCell& cell(std::size_t row, HpzMode mode) const {
    return cells.at(row * 3 + static_cast<std::size_t>(mode));
  }
  std::size_t rows() const { return cells.size() / 3; }
};

inline StabilityReport cmd_sweep_stability(const RunConfig& base) {
  base.validate();
  std::vector<RunConfig> cfgs;
  for (std::size_t w : base.sweep_widths) {
    for (auto mode : {HpzMode::Off, HpzMode::Stock, HpzMode::Fixed}) {
      RunConfig c = base;
      c.dims = resize_hidden(base.dims, w);
      c.scheme.hpz = mode;
      cfgs.push_back(c);
    }
  }
  RunOptions opts;
  opts.stop_at_nan = true;
  const auto reports = run_all(cfgs, [opts](const RunConfig& c) { return cmd_run(c, opts); });
  StabilityReport out;
  out.base = base;
  for (const auto& r : reports) {
    out.cells.push_back(
        {r.config.dims, r.config.scheme.hpz, r.verdict, r.hazards, r.expected_stable()});
  }
  return out;
}

inline std::string cell_label(const DivergenceVerdict& v) {
  if (v.stable()) return "stable";
  return std::string(to_string(v.status)) + "@" + std::to_string(v.step);
}

inline Json to_json(const StabilityReport& r) {
  Json j;
  j["command"] = "sweep-stability";
  j["config"] = config_json(r.base);
  j["ok"] = r.ok();
  Json rows = Json::array();
  for (std::size_t i = 0; i < r.rows(); ++i) {
    Json row;
    row["dims"] = dims_label(r.cell(i, HpzMode::Off).dims);
    row["params"] = param_count(r.cell(i, HpzMode::Off).dims);
    for (auto mode : {HpzMode::Off, HpzMode::Stock, HpzMode::Fixed}) {
      const auto& c = r.cell(i, mode);
      Json e = verdict_json(c.verdict);
      e["hazards"] = c.hazards;
      e["expected_stable"] = c.expected_stable;
      row[to_string(mode)] = std::move(e);
    }
    rows.push_back(std::move(row));
  }
  j["rows"] = std::move(rows);
  return j;
}

/// `dims,params,off,stock,fixed`
inline std::string stability_csv(const StabilityReport& r) {
  std::ostringstream os;
  os << "dims,params,off,stock,fixed\n";
  for (std::size_t i = 0; i < r.rows(); ++i) {
    const auto& dims = r.cell(i, HpzMode::Off).dims;
    os << '"' << dims_label(dims) << "\"," << param_count(dims);
    for (auto mode : {HpzMode::Off, HpzMode::Stock, HpzMode::Fixed}) {
      os << ',' << cell_label(r.cell(i, mode).verdict);
    }
    os << '\n';
  }
  return os.str();
}

inline std::string stability_text(const StabilityReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "model" << std::setw(16) << "without hpZ" << std::setw(16)
     << "with hpZ" << "modified hpZ\n";
  for (std::size_t i = 0; i < r.rows(); ++i) {
    os << std::setw(22) << dims_label(r.cell(i, HpzMode::Off).dims);
    for (auto mode : {HpzMode::Off, HpzMode::Stock, HpzMode::Fixed}) {
      const auto& v = r.cell(i, mode).verdict;
      const std::string mark = v.stable() ? "✓" : "× (" + cell_label(v) + ")";
      // setw counts bytes; pad by hand so the UTF-8 marks line up.
      const std::size_t visible = v.stable() ? 1 : 3 + cell_label(v).size() + 1;
      os << mark << std::string(visible < 16 ? 16 - visible : 1, ' ');
    }
    os << '\n';
  }
  os << "policy=" << to_string(r.base.policy) << " garbage="
     << (r.base.garbage.kind == GarbagePattern::Kind::NanFill ? "nan" : "noise")
     << " prefetch_depth=" << r.base.scheme.prefetch_depth << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------------------
// Throughput sweep

struct ThroughputRow {
  std::vector<std::size_t> dims;
  double qgz_only = 0.0;
  double stock = 0.0;
  double fixed = 0.0;
  bool all_stable = true;

  double speedup_stock() const { return qgz_only > 0.0 ? stock / qgz_only - 1.0 : 0.0; }
  double speedup_fixed() const { return qgz_only > 0.0 ? fixed / qgz_only - 1.0 : 0.0; }
  double fixed_vs_stock() const { return stock > 0.0 ? (fixed - stock) / stock : 0.0; }
};

struct ThroughputReport {
  RunConfig base;
  std::vector<ThroughputRow> rows;

  bool ok() const {
    for (const auto& r : rows) {
      if (!r.all_stable) return false;
    }
    return true;
  }
};

/// qgZ only, qgZ with stock hpZ and qgZ with modified hpZ. All three run under program order:
/// a diverged run has no meaningful throughput, and program order keeps stock hpZ finite.
inline ThroughputReport cmd_sweep_throughput(const RunConfig& base) {
  base.validate();
  std::vector<RunConfig> cfgs;
  for (std::size_t w : base.sweep_widths) {
    for (auto mode : {HpzMode::Off, HpzMode::Stock, HpzMode::Fixed}) {
      RunConfig c = base;
      c.dims = resize_hidden(base.dims, w);
      c.scheme.hpz = mode;
      c.scheme.qgz = true;
      c.policy = SchedulePolicy::Variant::ProgramOrder;
      cfgs.push_back(c);
    }
  }
  const auto reports = run_all(cfgs, [](const RunConfig& c) { return cmd_run(c); });
  ThroughputReport out;
  out.base = base;
  for (std::size_t i = 0; i < reports.size(); i += 3) {
    ThroughputRow row;
    row.dims = reports[i].config.dims;
    row.qgz_only = reports[i].tokens_per_sec_per_node;
    row.stock = reports[i + 1].tokens_per_sec_per_node;
    row.fixed = reports[i + 2].tokens_per_sec_per_node;
    for (std::size_t k = i; k < i + 3; ++k) row.all_stable = row.all_stable && reports[k].ok();
    out.rows.push_back(row);
  }
  return out;
}

inline Json to_json(const ThroughputReport& r) {
  Json j;
  j["command"] = "sweep-throughput";
  j["config"] = config_json(r.base);
  j["ok"] = r.ok();
  j["note"] = "all rows use qgZ and the program-order policy";
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    Json e;
    e["dims"] = dims_label(row.dims);
    e["qgz_only_tokens_per_sec_per_node"] = row.qgz_only;
    e["qgz_stock_hpz_tokens_per_sec_per_node"] = row.stock;
    e["qgz_fixed_hpz_tokens_per_sec_per_node"] = row.fixed;
    e["stock_speedup"] = row.speedup_stock();
    e["fixed_speedup"] = row.speedup_fixed();
    e["fixed_vs_stock"] = row.fixed_vs_stock();
    e["all_stable"] = row.all_stable;
    rows.push_back(std::move(e));
  }
  j["rows"] = std::move(rows);
  return j;
}

/// `dims,qgz_only,qgz_stock_hpz,qgz_fixed_hpz,stock_speedup,fixed_speedup,fixed_vs_stock`
inline std::string throughput_csv(const ThroughputReport& r) {
  std::ostringstream os;
  os << "dims,qgz_only,qgz_stock_hpz,qgz_fixed_hpz,stock_speedup,fixed_speedup,fixed_vs_stock\n";
  for (const auto& row : r.rows) {
    os << '"' << dims_label(row.dims) << "\"," << detail::fmt(row.qgz_only) << ','
       << detail::fmt(row.stock) << ',' << detail::fmt(row.fixed) << ','
       << detail::fmt(row.speedup_stock()) << ',' << detail::fmt(row.speedup_fixed()) << ','
       << detail::fmt(row.fixed_vs_stock()) << '\n';
  }
  return os.str();
}

inline std::string throughput_text(const ThroughputReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "model" << std::setw(14) << "qgZ" << std::setw(24)
     << "qgZ + hpZ" << "qgZ + modified hpZ\n";
  os << std::fixed << std::setprecision(1);
  for (const auto& row : r.rows) {
    std::ostringstream stock, fixed;
    stock << std::fixed << std::setprecision(1) << row.stock << " (+"
          << 100.0 * row.speedup_stock() << "%)";
    fixed << std::fixed << std::setprecision(1) << row.fixed << " (+"
          << 100.0 * row.speedup_fixed() << "%)";
    os << std::setw(22) << dims_label(row.dims) << std::setw(14) << row.qgz_only
       << std::setw(24) << stock.str() << fixed.str() << '\n';
  }
  os << "tokens/s/node, program-order policy\n";
  return os.str();
}

// ---------------------------------------------------------------------------------------
// Race hunt

struct RaceHuntReport {
  RunConfig base;
  std::size_t trials = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<DivergenceVerdict> verdicts;
  std::vector<std::size_t> hazards;

  std::size_t diverged() const {
    std::size_t n = 0;
    for (const auto& v : verdicts) n += v.status == DivergenceVerdict::Status::NaN ? 1 : 0;
    return n;
  }
  double fraction() const {
    return trials ? static_cast<double>(diverged()) / static_cast<double>(trials) : 0.0;
  }
  bool hazards_constant() const {
    for (auto h : hazards) {
      if (h != hazards.front()) return false;
    }
    return true;
  }
  bool ok() const { return base.scheme.hpz == HpzMode::Stock || diverged() == 0; }
};

/// Runs the base scheme under `trials` seeded random schedules, seeds base.seed + i.
inline RaceHuntReport cmd_race_hunt(const RunConfig& base, std::size_t trials) {
  if (trials == 0) throw InvalidArgument("race-hunt needs trials >= 1");
  base.validate();
  std::vector<RunConfig> cfgs;
  RaceHuntReport out;
  out.base = base;
  out.trials = trials;
  for (std::size_t i = 0; i < trials; ++i) {
    RunConfig c = base;
    c.policy = SchedulePolicy::Variant::RandomSeeded;
    c.seed = base.seed + i;
    out.seeds.push_back(c.seed);
    cfgs.push_back(c);
  }
  RunOptions opts;
  opts.stop_at_nan = true;
  const auto reports = run_all(cfgs, [opts](const RunConfig& c) { return cmd_run(c, opts); });
  for (const auto& r : reports) {
    out.verdicts.push_back(r.verdict);
    out.hazards.push_back(r.hazards);
  }
  out.base.trials = trials;
  return out;
}

inline Json to_json(const RaceHuntReport& r) {
  Json j;
  j["command"] = "race-hunt";
  j["config"] = config_json(r.base);
  j["ok"] = r.ok();
  j["trials"] = r.trials;
  j["diverged"] = r.diverged();
  j["manifestation_fraction"] = r.fraction();
  j["hazards"] = r.hazards.empty() ? 0 : r.hazards.front();
  j["hazards_constant"] = r.hazards_constant();
  Json runs = Json::array();
  for (std::size_t i = 0; i < r.verdicts.size(); ++i) {
    Json e = verdict_json(r.verdicts[i]);
    e["seed"] = r.seeds[i];
    runs.push_back(std::move(e));
  }
  j["runs"] = std::move(runs);
  return j;
}

}  // namespace hpz
