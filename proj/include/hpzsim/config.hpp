// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// Plain-text key/value run configuration.
//
//   # comment
//   nodes = 2
//   hpz = fixed
//
// Every key has a default; unknown keys are rejected by name. The canonical echo produced
// by to_pairs() parses back to the same configuration.

#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hpzsim/errors.hpp"
#include "hpzsim/numerics.hpp"
#include "hpzsim/stream_engine.hpp"
#include "hpzsim/topology.hpp"
#include "hpzsim/trainer.hpp"
#include "hpzsim/zeropp.hpp"

namespace hpz {

using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // Prefer the shortest spelling that still round-trips.
  for (int prec = 1; prec <= 17; ++prec) {
    char shortbuf[64];
    std::snprintf(shortbuf, sizeof(shortbuf), "%.*g", prec, v);
    if (std::strtod(shortbuf, nullptr) == v) return shortbuf;
  }
  return buf;
}

/// Shortest spelling that parses back to the same float.
inline std::string format_float(float v) {
  for (int prec = 1; prec <= 9; ++prec) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*g", prec, static_cast<double>(v));
    if (std::strtof(buf, nullptr) == v) return buf;
  }
  return format_double(v);
}

}  // namespace detail

/// Parses `key = value` lines. Later duplicates override earlier ones.
inline KeyValues parse_key_values(std::istream& in) {
  KeyValues kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const auto key = detail::trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = detail::trim(line.substr(eq + 1));
  }
  return kv;
}

struct RunConfig {
  CostModel cost;
  Scheme scheme;

  std::vector<std::size_t> dims{16, 32, 32, 32, 8};
  std::optional<std::size_t> layer_elems;  // cost-model element count per layer
  std::uint64_t model_seed = 1;
  std::uint64_t task_seed = 2;
  std::size_t batch_size = 16;
  std::size_t tokens_per_step = 4096;

  OptimizerConfig optimizer;
  std::size_t steps = 100;
  std::size_t window = 50;

  SchedulePolicy::Variant policy = SchedulePolicy::Variant::Adversarial;
  std::uint64_t seed = 0;
  GarbagePattern garbage = GarbagePattern::nan_fill();

  std::vector<std::size_t> sweep_widths{16, 32, 64};
  std::size_t trials = 100;

  std::size_t layers() const noexcept { return dims.size() - 1; }

  SchedulePolicy schedule(std::uint64_t policy_seed) const { return {policy, policy_seed}; }

  void validate() const {
    cost.validate();
    validate_dims(dims);
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (tokens_per_step == 0) throw ConfigError("tokens_per_step must be >= 1");
    if (steps == 0) throw ConfigError("steps must be >= 1");
    if (!(optimizer.lr >= 0.0F)) throw ConfigError("lr must be >= 0");
    if (layer_elems && *layer_elems == 0) throw ConfigError("layer_elems must be >= 1");
    if (sweep_widths.empty()) throw ConfigError("sweep_widths must list at least one width");
  }
};

namespace detail {

template <typename T>
T parse_unsigned(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(d)) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return d;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_unsigned<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

inline std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace detail

inline HpzMode parse_hpz(const std::string& v) {
  if (v == "off") return HpzMode::Off;
  if (v == "stock") return HpzMode::Stock;
  if (v == "fixed") return HpzMode::Fixed;
  throw ConfigError("config key 'hpz': expected off|stock|fixed, got '" + v + "'");
}

inline SchedulePolicy::Variant parse_policy(const std::string& v) {
  if (v == "program-order") return SchedulePolicy::Variant::ProgramOrder;
  if (v == "adversarial") return SchedulePolicy::Variant::Adversarial;
  if (v == "random") return SchedulePolicy::Variant::RandomSeeded;
  throw ConfigError("config key 'policy': expected program-order|adversarial|random, got '" + v +
                    "'");
}

/// Applies `kv` on top of `base`. Throws ConfigError naming the offending key.
inline RunConfig apply_key_values(RunConfig cfg, const KeyValues& kv) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_unsigned;
  std::optional<std::size_t> layers;
  std::string garbage_kind;
  std::optional<double> noise_magnitude;
  for (const auto& [key, v] : kv) {
    auto& topo = cfg.cost.topology;
    if (key == "nodes") topo.nodes = parse_unsigned<std::size_t>(key, v);
    else if (key == "devices_per_node") topo.devices_per_node = parse_unsigned<std::size_t>(key, v);
    else if (key == "intra_bw") topo.intra_bw = parse_double(key, v);
    else if (key == "inter_bw") topo.inter_bw = parse_double(key, v);
    else if (key == "intra_latency") topo.intra_latency = parse_double(key, v);
    else if (key == "inter_latency") topo.inter_latency = parse_double(key, v);
    else if (key == "compute_time_per_layer_pass") cfg.cost.compute_time_per_layer_pass = parse_double(key, v);
    else if (key == "event_sync_latency") cfg.cost.event_sync_latency = parse_double(key, v);
    else if (key == "hpz") cfg.scheme.hpz = parse_hpz(v);
    else if (key == "qwz") cfg.scheme.qwz = parse_bool(key, v);
    else if (key == "qgz") cfg.scheme.qgz = parse_bool(key, v);
    else if (key == "prefetch_depth") cfg.scheme.prefetch_depth = parse_unsigned<std::size_t>(key, v);
    else if (key == "dims") cfg.dims = detail::parse_list(key, v);
    else if (key == "layers") layers = parse_unsigned<std::size_t>(key, v);
    else if (key == "layer_elems") {
      if (v == "auto" || v.empty()) cfg.layer_elems.reset();
      else cfg.layer_elems = parse_unsigned<std::size_t>(key, v);
    }
    else if (key == "model_seed") cfg.model_seed = parse_unsigned<std::uint64_t>(key, v);
    else if (key == "task_seed") cfg.task_seed = parse_unsigned<std::uint64_t>(key, v);
    else if (key == "batch_size") cfg.batch_size = parse_unsigned<std::size_t>(key, v);
    else if (key == "tokens_per_step") cfg.tokens_per_step = parse_unsigned<std::size_t>(key, v);
    else if (key == "optimizer") {
      if (v == "sgd") cfg.optimizer.kind = OptimizerConfig::Kind::SGD;
      else if (v == "adam") cfg.optimizer.kind = OptimizerConfig::Kind::Adam;
      else throw ConfigError("config key 'optimizer': expected sgd|adam, got '" + v + "'");
    }
    else if (key == "lr") cfg.optimizer.lr = static_cast<float>(parse_double(key, v));
    else if (key == "adam_beta1") cfg.optimizer.beta1 = static_cast<float>(parse_double(key, v));
    else if (key == "adam_beta2") cfg.optimizer.beta2 = static_cast<float>(parse_double(key, v));
    else if (key == "adam_eps") cfg.optimizer.eps = static_cast<float>(parse_double(key, v));
    else if (key == "steps") cfg.steps = parse_unsigned<std::size_t>(key, v);
    else if (key == "window") cfg.window = parse_unsigned<std::size_t>(key, v);
    else if (key == "policy") cfg.policy = parse_policy(v);
    else if (key == "seed") cfg.seed = parse_unsigned<std::uint64_t>(key, v);
    else if (key == "garbage") garbage_kind = v;
    else if (key == "noise_magnitude") noise_magnitude = parse_double(key, v);
    else if (key == "sweep_widths") cfg.sweep_widths = detail::parse_list(key, v);
    else if (key == "trials") cfg.trials = parse_unsigned<std::size_t>(key, v);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  if (!garbage_kind.empty()) {
    if (garbage_kind == "nan") cfg.garbage = GarbagePattern::nan_fill();
    else if (garbage_kind == "noise") cfg.garbage = GarbagePattern::seeded_noise(1e6F);
    else throw ConfigError("config key 'garbage': expected nan|noise, got '" + garbage_kind + "'");
  }
  if (noise_magnitude) cfg.garbage.magnitude = static_cast<float>(*noise_magnitude);
  if (layers && *layers != cfg.layers()) {
    if (kv.count("dims")) {
      throw ConfigError("config key 'layers' = " + std::to_string(*layers) +
                        " disagrees with 'dims' (" + std::to_string(cfg.layers()) + " layers)");
    }
    // Resize the hidden stack, keeping input, hidden width and output.
    if (*layers == 0) throw ConfigError("config key 'layers' must be >= 1");
    const std::size_t hidden = cfg.dims.size() > 2 ? cfg.dims[1] : cfg.dims.front();
    std::vector<std::size_t> dims{cfg.dims.front()};
    for (std::size_t i = 1; i < *layers; ++i) dims.push_back(hidden);
    dims.push_back(cfg.dims.back());
    cfg.dims = dims;
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(std::istream& in, RunConfig base = {}) {
  return apply_key_values(std::move(base), parse_key_values(in));
}

/// Reads a key/value file, or a JSON report whose "config" object is the same key/value set.
inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    const auto j = nlohmann::json::parse(text);
    if (!j.contains("config") || !j["config"].is_object()) {
      throw ConfigError("'" + path + "' is JSON but has no config object");
    }
    KeyValues kv;
    for (const auto& [k, v] : j["config"].items()) kv[k] = v.get<std::string>();
    return apply_key_values(std::move(base), kv);
  }
  std::istringstream in(text);
  return load_config(in, std::move(base));
}

/// Canonical, ordered echo of every setting.
inline std::vector<std::pair<std::string, std::string>> to_pairs(const RunConfig& c) {
  using detail::format_double;
  const auto& t = c.cost.topology;
  std::vector<std::pair<std::string, std::string>> out{
      {"nodes", std::to_string(t.nodes)},
      {"devices_per_node", std::to_string(t.devices_per_node)},
      {"intra_bw", format_double(t.intra_bw)},
      {"inter_bw", format_double(t.inter_bw)},
      {"intra_latency", format_double(t.intra_latency)},
      {"inter_latency", format_double(t.inter_latency)},
      {"compute_time_per_layer_pass", format_double(c.cost.compute_time_per_layer_pass)},
      {"event_sync_latency", format_double(c.cost.event_sync_latency)},
      {"hpz", to_string(c.scheme.hpz)},
      {"qwz", c.scheme.qwz ? "true" : "false"},
      {"qgz", c.scheme.qgz ? "true" : "false"},
      {"prefetch_depth", std::to_string(c.scheme.prefetch_depth)},
      {"dims", detail::join(c.dims)},
      {"layers", std::to_string(c.layers())},
      {"layer_elems", c.layer_elems ? std::to_string(*c.layer_elems) : "auto"},
      {"model_seed", std::to_string(c.model_seed)},
      {"task_seed", std::to_string(c.task_seed)},
      {"batch_size", std::to_string(c.batch_size)},
      {"tokens_per_step", std::to_string(c.tokens_per_step)},
      {"optimizer", c.optimizer.kind == OptimizerConfig::Kind::SGD ? "sgd" : "adam"},
      {"lr", detail::format_float(c.optimizer.lr)},
      {"adam_beta1", detail::format_float(c.optimizer.beta1)},
      {"adam_beta2", detail::format_float(c.optimizer.beta2)},
      {"adam_eps", detail::format_float(c.optimizer.eps)},
      {"steps", std::to_string(c.steps)},
      {"window", std::to_string(c.window)},
      {"policy", to_string(c.policy)},
      {"seed", std::to_string(c.seed)},
      {"garbage", c.garbage.kind == GarbagePattern::Kind::NanFill ? "nan" : "noise"},
      {"noise_magnitude", detail::format_float(c.garbage.magnitude)},
      {"sweep_widths", detail::join(c.sweep_widths)},
      {"trials", std::to_string(c.trials)},
  };
  return out;
}

}  // namespace hpz
