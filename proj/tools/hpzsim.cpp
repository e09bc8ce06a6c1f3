// Copyright (c) 2026 The hpzsim Authors.
// SPDX-License-Identifier: Apache-2.0
//
// hpzsim command line: single runs, the stability matrix, the throughput sweep and race
// hunting. Reports go to --out as JSON/CSV/text; a short summary always goes to stdout.
//
// Exit status: 0 when every run expected to train stays stable, 1 otherwise, 2 on bad input.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hpzsim/report.hpp"

namespace {

struct Flags {
  std::string config;
  std::string hpz;
  bool qwz = false;
  bool qgz = false;
  std::string policy;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::string out;
  bool trace = false;
  std::optional<std::size_t> trials;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value config file, or a previous JSON report");
  cmd->add_option("--hpz", f.hpz, "hierarchical partitioning mode")
      ->check(CLI::IsMember({"off", "stock", "fixed"}));
  cmd->add_flag("--qwz", f.qwz, "quantize weights before gathers (int8)");
  cmd->add_flag("--qgz", f.qgz, "quantize gradients into an int4 all-to-all");
  cmd->add_option("--policy", f.policy, "schedule policy")
      ->check(CLI::IsMember({"program-order", "adversarial", "random"}));
  cmd->add_option("--seed", f.seed, "policy and garbage seed");
  cmd->add_option("--steps", f.steps, "training steps per run");
  cmd->add_option("--out", f.out, "directory for report files");
}

hpz::RunConfig resolve(const Flags& f) {
  hpz::RunConfig cfg = f.config.empty() ? hpz::RunConfig{} : hpz::load_config_file(f.config);
  hpz::KeyValues kv;
  if (!f.hpz.empty()) kv["hpz"] = f.hpz;
  if (f.qwz) kv["qwz"] = "true";
  if (f.qgz) kv["qgz"] = "true";
  if (!f.policy.empty()) kv["policy"] = f.policy;
  if (f.seed) kv["seed"] = std::to_string(*f.seed);
  if (f.steps) kv["steps"] = std::to_string(*f.steps);
  if (f.trials) kv["trials"] = std::to_string(*f.trials);
  return hpz::apply_key_values(cfg, kv);
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
}

std::optional<std::filesystem::path> out_dir(const Flags& f) {
  if (f.out.empty()) return std::nullopt;
  std::filesystem::create_directories(f.out);
  return std::filesystem::path(f.out);
}

int do_run(const Flags& f) {
  const auto cfg = resolve(f);
  const auto dir = out_dir(f);
  if (f.trace && !dir) throw hpz::ConfigError("--trace needs --out");
  hpz::RunOptions opts;
  std::ofstream trace_file;
  if (f.trace) {
    trace_file.open(*dir / "trace.jsonl", std::ios::binary);
    opts.trace = &trace_file;
    opts.trace_path = "trace.jsonl";
  }
  const auto rep = hpz::cmd_run(cfg, opts);
  const auto json = hpz::to_json(rep).dump(2) + "\n";
  if (dir) {
    write_file(*dir / "report.json", json);
    write_file(*dir / "loss.csv", hpz::loss_csv(rep));
  }
  const auto& last = rep.steps.back();
  std::cout << "hpz=" << hpz::to_string(cfg.scheme.hpz) << " policy=" << hpz::to_string(cfg.policy)
            << " steps=" << rep.steps.size() << " verdict=" << hpz::cell_label(rep.verdict)
            << " hazards=" << rep.hazards << " final_loss=" << hpz::detail::fmt(last.loss)
            << " tokens/s/node=" << hpz::detail::fmt(rep.tokens_per_sec_per_node) << '\n';
  return rep.ok() ? 0 : 1;
}

int do_stability(const Flags& f) {
  const auto rep = hpz::cmd_sweep_stability(resolve(f));
  if (const auto dir = out_dir(f)) {
    write_file(*dir / "stability.json", hpz::to_json(rep).dump(2) + "\n");
    write_file(*dir / "stability.csv", hpz::stability_csv(rep));
    write_file(*dir / "stability.txt", hpz::stability_text(rep));
  }
  std::cout << hpz::stability_text(rep);
  return rep.ok() ? 0 : 1;
}

int do_throughput(const Flags& f) {
  const auto rep = hpz::cmd_sweep_throughput(resolve(f));
  if (const auto dir = out_dir(f)) {
    write_file(*dir / "throughput.json", hpz::to_json(rep).dump(2) + "\n");
    write_file(*dir / "throughput.csv", hpz::throughput_csv(rep));
    write_file(*dir / "throughput.txt", hpz::throughput_text(rep));
  }
  std::cout << hpz::throughput_text(rep);
  return rep.ok() ? 0 : 1;
}

int do_race_hunt(const Flags& f) {
  const auto cfg = resolve(f);
  const auto rep = hpz::cmd_race_hunt(cfg, cfg.trials);
  if (const auto dir = out_dir(f)) {
    write_file(*dir / "race_hunt.json", hpz::to_json(rep).dump(2) + "\n");
  }
  std::cout << "hpz=" << hpz::to_string(cfg.scheme.hpz) << " trials=" << rep.trials
            << " diverged=" << rep.diverged() << " fraction=" << hpz::detail::fmt(rep.fraction())
            << " hazards=" << (rep.hazards.empty() ? 0 : rep.hazards.front())
            << (rep.hazards_constant() ? "" : " (varies)") << '\n';
  return rep.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hpzsim: sharded training simulator with hierarchical weight partitioning"};
  app.require_subcommand(1);
  Flags flags;

  auto* run = app.add_subcommand("run", "train one configuration and report per-step metrics");
  add_common(run, flags);
  run->add_flag("--trace", flags.trace, "write the executed schedule as trace.jsonl");

  auto* stab = app.add_subcommand("sweep-stability", "off/stock/fixed stability matrix");
  add_common(stab, flags);

  auto* thr = app.add_subcommand("sweep-throughput", "qgZ vs qgZ+hpZ throughput table");
  add_common(thr, flags);

  auto* hunt = app.add_subcommand("race-hunt", "seeded random schedules of one scheme");
  add_common(hunt, flags);
  hunt->add_option("--trials", flags.trials, "number of seeds to try");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return do_run(flags);
    if (stab->parsed()) return do_stability(flags);
    if (thr->parsed()) return do_throughput(flags);
    return do_race_hunt(flags);
  } catch (const hpz::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
