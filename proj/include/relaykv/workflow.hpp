// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "relaykv/metrics.hpp"
#include "relaykv/relay_engine.hpp"

namespace relaykv {

enum class Strategy { kFull, kZero, kRelay, kBlend };
std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

// One pipeline stage. The prompt is prefix ++ upstream outputs (verbatim,
// in template order, no separators) ++ suffix. Token ids may be given
// explicitly or generated from the workflow seed at the stated lengths.
struct AgentSpec {
  std::string name;
  std::vector<TokenId> prefix, suffix;
  std::size_t prefix_len = 0, suffix_len = 0;
  std::vector<std::size_t> upstream;
  std::size_t max_new_tokens = 32;
  Strategy strategy = Strategy::kFull;
};

struct WorkflowSpec {
  std::uint64_t seed = 1;
  std::vector<AgentSpec> agents;

  void validate() const;  // >= 2 agents, upstream references point backwards
};

WorkflowSpec workflow_from_json(const nlohmann::json& j);
nlohmann::json workflow_to_json(const WorkflowSpec& spec);
WorkflowSpec load_workflow(const std::filesystem::path& path);

nlohmann::json two_stage_to_json(const TwoStageConfig& cfg);
TwoStageConfig two_stage_from_json(const nlohmann::json& j);
TwoStageConfig load_two_stage(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// workflow run
// ---------------------------------------------------------------------------

struct AgentReport {
  std::string name;
  Strategy strategy = Strategy::kFull;
  std::size_t prompt_tokens = 0;
  std::size_t segment_tokens = 0;  // total length of relayed upstream content
  ReuseStats stats;
  std::vector<SelectionSet> selections;  // one per relayed segment
  // agreement vs a full-prefill oracle run on identical inputs
  double agreement_exact = 1.0;
  double first_logit_max_abs = 0.0;
  double first_logit_kl = 0.0;
  std::vector<TokenId> output, oracle_output;
};

struct RunReport {
  std::string model_id;
  WorkflowSpec spec;
  SelectionThresholds thresholds;
  double blend_alpha = 0.2;
  std::size_t profile_l_start = 0, profile_l_det = 0, profile_l_end = 0;
  std::vector<AgentReport> agents;
  double total_flops_cost = 0.0;
  double total_flops_full_equiv = 0.0;
};

struct RunOptions {
  SelectionThresholds thresholds;
  // Overrides the strategy of every agent that has upstream content.
  std::optional<Strategy> strategy_override;
  double blend_alpha = 0.2;
  bool score_agreement = true;  // bench runs skip the oracle pass
};

// Drives the chain: each agent assembles its prompt from the strategy run's
// actual outputs, prefills per its strategy, then greedy-decodes its own
// output with capture so the next hop can relay it. Deterministic per seed.
RunReport run_workflow(const Weights& w, const WorkflowSpec& spec, const LayerProfile& profile,
                       const RunOptions& opts = {});

// Wall-clock fields are excluded by default so identical runs serialize to
// identical bytes; include_timings adds them.
nlohmann::json report_to_json(const RunReport& report, bool include_timings = false);
void report_csv(const RunReport& report, std::ostream& os);

// ---------------------------------------------------------------------------
// observation bundle (macro table, layer curves, token profile, sweeps)
// ---------------------------------------------------------------------------

struct SettingCurves {
  std::vector<double> s_value_cos, s_key_cos, s_value_norm, s_key_norm, rho;
};

struct MacroRow {
  ComparisonSetting setting;
  double value_cos = 0.0, key_cos = 0.0, value_norm = 0.0, key_norm = 0.0;
};

struct SweepRow {
  std::size_t layer = 0;
  double recovery_up_to = 0.0;  // full-prefill KV substituted at layers [0, layer]
  double recovery_from = 0.0;   // substituted at layers [layer, L)
};

struct ObserveResult {
  std::vector<MacroRow> macro;
  std::vector<std::pair<ComparisonSetting, SettingCurves>> curves;
  std::vector<double> token_profile;  // mean value-cos similarity by position
  std::vector<SweepRow> sweep;
};

ObserveResult observe(const Weights& w, const TwoStageConfig& cfg);
void write_observe_csv(const ObserveResult& result, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// length-scaling bench
// ---------------------------------------------------------------------------

struct BenchRow {
  std::size_t cumulative_len = 0;
  std::size_t agent = 0;
  Strategy strategy = Strategy::kFull;
  std::size_t prompt_tokens = 0, segment_tokens = 0;
  double flops_cost = 0.0, flops_total = 0.0, flops_full_equiv = 0.0;
  double reuse_rate = 0.0;
  double prefill_wall_ms = 0.0;
};

// Chains num_agents agents with cumulative context; per-agent output length
// is cumulative_len / num_agents, prompts synthesized at exact token counts.
std::vector<BenchRow> bench_lengths(const Weights& w, std::span<const std::size_t> lengths,
                                    std::size_t num_agents, std::span<const Strategy> strategies,
                                    const LayerProfile& profile,
                                    const SelectionThresholds& thresholds, std::uint64_t seed);
void bench_csv(std::span<const BenchRow> rows, std::ostream& os);

// KL(reference || other) between softmax distributions of two logit rows.
double logit_kl(std::span<const float> reference, std::span<const float> other);
double max_abs_diff(std::span<const float> a, std::span<const float> b);

}  // namespace relaykv
