// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "relaykv/errors.hpp"
#include "relaykv/profiler.hpp"
#include "relaykv/relay_engine.hpp"
#include "relaykv/weights_io.hpp"
#include "relaykv/workflow.hpp"

namespace {

// Exit codes: 0 ok, 2 usage, 3 I/O, 4 schema/validation, 5 internal.
enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kIo = 3,
  kSchema = 4,
  kInternal = 5,
};

void print_error(const char* kind, int code, const std::string& message) {
  nlohmann::json j;
  j["error"] = {{"kind", kind}, {"code", code}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

// --out is resolved against RELAYKV_OUT_DIR when it is relative and the
// variable is set.
std::filesystem::path resolve_out(const std::string& path) {
  std::filesystem::path p(path);
  if (p.is_relative()) {
    if (const char* dir = std::getenv("RELAYKV_OUT_DIR")) {
      return std::filesystem::path(dir) / p;
    }
  }
  return p;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw relaykv::IoError("cannot open: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw relaykv::SchemaError(path + ": " + e.what());
  }
  return j;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw relaykv::IoError("cannot open for writing: " + path.string());
  f << text;
  if (!f) throw relaykv::IoError("write failed: " + path.string());
}

struct RunFlags {
  std::string model, workflow, profile, out, csv;
  std::string strategy;
  double alpha = 0.2;
  double tau_dev = 1.5;
  double tau_inf = 1.45;
  std::size_t suffix_k = 10;
  std::optional<std::uint64_t> seed;
  bool timings = false;
};

int cmd_gen_model(const std::string& spec_path, std::uint64_t seed, const std::string& out) {
  const relaykv::ModelSpec spec = relaykv::spec_from_json(read_json_file(spec_path));
  const relaykv::Weights w = relaykv::init_weights(spec, seed);
  relaykv::save_weights(w, resolve_out(out));
  std::cout << "wrote " << resolve_out(out).string() << " (" << w.model_id << ")\n";
  return kOk;
}

int cmd_profile(const std::string& model, const std::string& calib, const std::string& params,
                const std::string& out) {
  const relaykv::Weights w = relaykv::load_weights(model);
  const relaykv::TwoStageConfig cfg = relaykv::load_two_stage(calib);
  relaykv::ProfilerParams pp;
  if (!params.empty()) {
    const nlohmann::json j = read_json_file(params);
    pp.tau_start = j.value("tau_start", pp.tau_start);
    pp.tail_layers = j.value("tail_layers", pp.tail_layers);
    pp.stability_lambda = j.value("stability_lambda", pp.stability_lambda);
    pp.consecutive = j.value("consecutive", pp.consecutive);
    pp.min_rise = j.value("min_rise", pp.min_rise);
    pp.first_negative_alpha = j.value("first_negative_alpha", pp.first_negative_alpha);
  }
  const relaykv::LayerProfile prof = relaykv::profile_model(w, cfg, pp);
  relaykv::save_profile(prof, resolve_out(out));
  std::cout << "profile: l_start=" << prof.l_start << " l_det=" << prof.l_det
            << " l_end=" << prof.l_end << " -> " << resolve_out(out).string() << "\n";
  return kOk;
}

int cmd_run(const RunFlags& flags) {
  const relaykv::Weights w = relaykv::load_weights(flags.model);
  relaykv::WorkflowSpec spec = relaykv::load_workflow(flags.workflow);
  if (flags.seed) spec.seed = *flags.seed;

  relaykv::LayerProfile prof;
  if (!flags.profile.empty()) {
    prof = relaykv::load_profile(flags.profile);
  }
  relaykv::RunOptions opts;
  opts.thresholds.tau_dev = flags.tau_dev;
  opts.thresholds.tau_inf = flags.tau_inf;
  opts.thresholds.suffix_k = flags.suffix_k;
  opts.blend_alpha = flags.alpha;
  if (!flags.strategy.empty()) {
    opts.strategy_override = relaykv::strategy_from_name(flags.strategy);
  }

  const relaykv::RunReport rep = relaykv::run_workflow(w, spec, prof, opts);
  write_text_file(resolve_out(flags.out),
                  relaykv::report_to_json(rep, flags.timings).dump(2) + "\n");
  if (!flags.csv.empty()) {
    std::ofstream f(resolve_out(flags.csv));
    if (!f) throw relaykv::IoError("cannot open for writing: " + flags.csv);
    relaykv::report_csv(rep, f);
  }
  for (std::size_t i = 0; i < rep.agents.size(); ++i) {
    const auto& a = rep.agents[i];
    std::cout << "agent " << i << " (" << relaykv::strategy_name(a.strategy)
              << "): reuse_rate=" << a.stats.reuse_rate
              << " agreement=" << a.agreement_exact << "\n";
  }
  return kOk;
}

int cmd_observe(const std::string& model, const std::string& calib, const std::string& out_dir) {
  const relaykv::Weights w = relaykv::load_weights(model);
  const relaykv::TwoStageConfig cfg = relaykv::load_two_stage(calib);
  const relaykv::ObserveResult res = relaykv::observe(w, cfg);
  relaykv::write_observe_csv(res, resolve_out(out_dir));
  std::cout << "wrote observation CSVs to " << resolve_out(out_dir).string() << "\n";
  return kOk;
}

int cmd_bench(const std::string& model, const std::string& lengths_csv, std::size_t agents,
              const std::string& strategies_csv, const std::string& profile_path,
              std::uint64_t seed, const std::string& out) {
  const relaykv::Weights w = relaykv::load_weights(model);

  std::vector<std::size_t> lengths;
  for (std::size_t pos = 0; pos < lengths_csv.size();) {
    const std::size_t comma = lengths_csv.find(',', pos);
    const std::string item = lengths_csv.substr(pos, comma - pos);
    lengths.push_back(std::stoul(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (lengths.empty()) throw relaykv::SchemaError("bench: empty --lengths");

  std::vector<relaykv::Strategy> strategies;
  for (std::size_t pos = 0; pos < strategies_csv.size();) {
    const std::size_t comma = strategies_csv.find(',', pos);
    strategies.push_back(
        relaykv::strategy_from_name(strategies_csv.substr(pos, comma - pos)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }

  relaykv::LayerProfile prof;
  if (!profile_path.empty()) {
    prof = relaykv::load_profile(profile_path);
  } else {
    // quick built-in calibration so bench is usable standalone
    relaykv::TwoStageConfig calib;
    calib.seed = seed;
    calib.instances = 3;
    calib.segment_len = 32;
    const relaykv::ProfilerParams pp;
    prof = relaykv::profile_model(w, calib, pp);
  }

  const auto rows = relaykv::bench_lengths(w, lengths, agents, strategies, prof,
                                           relaykv::SelectionThresholds{}, seed);
  std::ofstream f(resolve_out(out));
  if (!f) throw relaykv::IoError("cannot open for writing: " + out);
  relaykv::bench_csv(rows, f);
  std::cout << "wrote " << rows.size() << " bench rows to " << resolve_out(out).string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"relaykv: decode-to-prefill KV cache relay engine"};
  app.require_subcommand(1);

  // gen-model
  auto* gen = app.add_subcommand("gen-model", "create a toy checkpoint");
  std::string gen_spec, gen_out;
  std::uint64_t gen_seed = 42;
  gen->add_option("--spec", gen_spec, "model spec JSON")->required();
  gen->add_option("--seed", gen_seed, "init seed");
  gen->add_option("--out", gen_out, "output weights file")->required();

  // profile
  auto* prof = app.add_subcommand("profile", "derive the layer profile offline");
  std::string prof_model, prof_calib, prof_params, prof_out;
  prof->add_option("--model", prof_model, "weights file")->required();
  prof->add_option("--calib", prof_calib, "calibration workload JSON")->required();
  prof->add_option("--params", prof_params, "profiler params JSON (optional)");
  prof->add_option("--out", prof_out, "output profile JSON")->required();

  // run
  auto* run = app.add_subcommand("run", "run a multi-agent workflow");
  RunFlags rf;
  run->add_option("--model", rf.model, "weights file")->required();
  run->add_option("--workflow", rf.workflow, "workflow config JSON")->required();
  run->add_option("--profile", rf.profile, "layer profile JSON");
  run->add_option("--strategy", rf.strategy, "override: relay|full|zero|blend");
  run->add_option("--alpha", rf.alpha, "blend recompute fraction");
  run->add_option("--tau-dev", rf.tau_dev, "deviation threshold factor");
  run->add_option("--tau-inf", rf.tau_inf, "influence threshold factor");
  run->add_option("--suffix-k", rf.suffix_k, "trailing tokens always rectified");
  std::uint64_t run_seed = 0;
  bool run_seed_set = false;
  run->add_option("--seed", run_seed, "workflow seed override")
      ->each([&](const std::string&) { run_seed_set = true; });
  run->add_option("--out", rf.out, "report JSON")->required();
  run->add_option("--csv", rf.csv, "flat per-agent CSV");
  run->add_flag("--timings", rf.timings, "include wall-clock fields in the report");

  // observe
  auto* obs = app.add_subcommand("observe", "emit similarity observation CSVs");
  std::string obs_model, obs_calib, obs_dir;
  obs->add_option("--model", obs_model, "weights file")->required();
  obs->add_option("--calib", obs_calib, "calibration workload JSON")->required();
  obs->add_option("--out-dir", obs_dir, "output directory")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "length-scaling cost sweep");
  std::string bench_model, bench_lengths_s, bench_strategies = "full,relay", bench_profile,
              bench_out;
  std::size_t bench_agents = 5;
  std::uint64_t bench_seed = 1;
  bench->add_option("--model", bench_model, "weights file")->required();
  bench->add_option("--lengths", bench_lengths_s, "comma-separated cumulative lengths")
      ->required();
  bench->add_option("--agents", bench_agents, "agents in the chain");
  bench->add_option("--strategies", bench_strategies, "comma-separated strategy list");
  bench->add_option("--profile", bench_profile, "layer profile JSON (derived if omitted)");
  bench->add_option("--seed", bench_seed, "workload seed");
  bench->add_option("--out", bench_out, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    print_error("usage", kUsage, e.what());
    return kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_model(gen_spec, gen_seed, gen_out);
    if (prof->parsed()) return cmd_profile(prof_model, prof_calib, prof_params, prof_out);
    if (run->parsed()) {
      if (run_seed_set) rf.seed = run_seed;
      return cmd_run(rf);
    }
    if (obs->parsed()) return cmd_observe(obs_model, obs_calib, obs_dir);
    if (bench->parsed()) {
      return cmd_bench(bench_model, bench_lengths_s, bench_agents, bench_strategies,
                       bench_profile, bench_seed, bench_out);
    }
  } catch (const relaykv::IoError& e) {
    print_error("io", kIo, e.what());
    return kIo;
  } catch (const relaykv::SchemaError& e) {
    print_error("schema", kSchema, e.what());
    return kSchema;
  } catch (const std::invalid_argument& e) {
    print_error("schema", kSchema, e.what());
    return kSchema;
  } catch (const std::exception& e) {
    print_error("internal", kInternal, e.what());
    return kInternal;
  }
  return kOk;
}
