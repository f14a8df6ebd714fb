// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/workflow.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "relaykv/errors.hpp"

namespace relaykv {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kFull: return "full";
    case Strategy::kZero: return "zero";
    case Strategy::kRelay: return "relay";
    case Strategy::kBlend: return "blend";
  }
  return "full";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "full") return Strategy::kFull;
  if (name == "zero") return Strategy::kZero;
  if (name == "relay") return Strategy::kRelay;
  if (name == "blend") return Strategy::kBlend;
  throw SchemaError("unknown strategy '" + name + "'");
}

void WorkflowSpec::validate() const {
  if (agents.size() < 2) throw SchemaError("workflow needs at least 2 agents");
  for (std::size_t i = 0; i < agents.size(); ++i) {
    const AgentSpec& a = agents[i];
    if (a.max_new_tokens == 0) {
      throw SchemaError("agent " + std::to_string(i) + ": max_new_tokens must be >= 1");
    }
    if (a.prefix.empty() && a.prefix_len == 0) {
      throw SchemaError("agent " + std::to_string(i) + ": needs a prefix");
    }
    for (std::size_t u : a.upstream) {
      if (u >= i) {
        throw SchemaError("agent " + std::to_string(i) + ": upstream must point backwards");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// config JSON
// ---------------------------------------------------------------------------

WorkflowSpec workflow_from_json(const nlohmann::json& j) {
  WorkflowSpec spec;
  try {
    spec.seed = j.value("seed", std::uint64_t{1});
    for (const auto& ja : j.at("agents")) {
      AgentSpec a;
      a.name = ja.value("name", "agent" + std::to_string(spec.agents.size()));
      if (ja.contains("prefix")) a.prefix = ja["prefix"].get<std::vector<TokenId>>();
      if (ja.contains("suffix")) a.suffix = ja["suffix"].get<std::vector<TokenId>>();
      a.prefix_len = ja.value("prefix_len", std::size_t{0});
      a.suffix_len = ja.value("suffix_len", std::size_t{0});
      a.upstream = ja.value("upstream", std::vector<std::size_t>{});
      a.max_new_tokens = ja.value("max_new_tokens", std::size_t{32});
      a.strategy = strategy_from_name(ja.value("strategy", std::string{"full"}));
      spec.agents.push_back(std::move(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("workflow config: ") + e.what());
  }
  spec.validate();
  return spec;
}

nlohmann::json workflow_to_json(const WorkflowSpec& spec) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seed"] = spec.seed;
  j["agents"] = nlohmann::json::array();
  for (const AgentSpec& a : spec.agents) {
    nlohmann::json ja;
    ja["name"] = a.name;
    if (!a.prefix.empty()) ja["prefix"] = a.prefix;
    if (!a.suffix.empty()) ja["suffix"] = a.suffix;
    if (a.prefix_len) ja["prefix_len"] = a.prefix_len;
    if (a.suffix_len) ja["suffix_len"] = a.suffix_len;
    if (!a.upstream.empty()) ja["upstream"] = a.upstream;
    ja["max_new_tokens"] = a.max_new_tokens;
    ja["strategy"] = strategy_name(a.strategy);
    j["agents"].push_back(std::move(ja));
  }
  return j;
}

WorkflowSpec load_workflow(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("workflow JSON parse error: " + std::string(e.what()));
  }
  return workflow_from_json(j);
}

namespace {

void parse_range(const nlohmann::json& j, const char* key, std::size_t& lo, std::size_t& hi) {
  if (!j.contains(key)) return;
  const auto& v = j[key];
  if (v.is_array()) {
    if (v.size() != 2) throw SchemaError(std::string(key) + ": expected [min, max]");
    lo = v[0].get<std::size_t>();
    hi = v[1].get<std::size_t>();
  } else {
    lo = hi = v.get<std::size_t>();
  }
}

}  // namespace

TwoStageConfig two_stage_from_json(const nlohmann::json& j) {
  TwoStageConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.instances = j.value("instances", c.instances);
    parse_range(j, "stage1_prefix", c.stage1_prefix_min, c.stage1_prefix_max);
    parse_range(j, "stage2_prefix", c.stage2_prefix_min, c.stage2_prefix_max);
    c.segment_len = j.value("segment_len", c.segment_len);
    c.stage2_suffix_len = j.value("stage2_suffix_len", c.stage2_suffix_len);
    c.sweep_instances = j.value("sweep_instances", c.sweep_instances);
    c.identical_prefix = j.value("identical_prefix", c.identical_prefix);
    c.snapshot_layer = j.value("snapshot_layer", c.snapshot_layer);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("calibration config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json two_stage_to_json(const TwoStageConfig& c) {
  return nlohmann::json{
      {"schema_version", 1},
      {"seed", c.seed},
      {"instances", c.instances},
      {"stage1_prefix", {c.stage1_prefix_min, c.stage1_prefix_max}},
      {"stage2_prefix", {c.stage2_prefix_min, c.stage2_prefix_max}},
      {"segment_len", c.segment_len},
      {"stage2_suffix_len", c.stage2_suffix_len},
      {"sweep_instances", c.sweep_instances},
      {"identical_prefix", c.identical_prefix},
      {"snapshot_layer", c.snapshot_layer},
  };
}

TwoStageConfig load_two_stage(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("calibration JSON parse error: " + std::string(e.what()));
  }
  return two_stage_from_json(j);
}

// ---------------------------------------------------------------------------
// agreement metrics
// ---------------------------------------------------------------------------

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mx = std::max(mx, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return mx;
}

double logit_kl(std::span<const float> reference, std::span<const float> other) {
  const auto log_softmax = [](std::span<const float> x, std::vector<double>& out) {
    double mx = x[0];
    for (float v : x) mx = std::max(mx, static_cast<double>(v));
    double lse = 0.0;
    for (float v : x) lse += std::exp(static_cast<double>(v) - mx);
    lse = mx + std::log(lse);
    out.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(x[i]) - lse;
  };
  std::vector<double> lr, lo;
  log_softmax(reference, lr);
  log_softmax(other, lo);
  double kl = 0.0;
  for (std::size_t i = 0; i < lr.size(); ++i) kl += std::exp(lr[i]) * (lr[i] - lo[i]);
  return kl;
}

// ---------------------------------------------------------------------------
// workflow run
// ---------------------------------------------------------------------------

namespace {

std::vector<TokenId> resolve_tokens(const std::vector<TokenId>& explicit_ids, std::size_t len,
                                    std::uint64_t seed, std::uint64_t salt,
                                    std::size_t vocab_size) {
  if (!explicit_ids.empty()) {
    for (TokenId t : explicit_ids) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) {
        throw SchemaError("explicit token id " + std::to_string(t) + " outside vocab");
      }
    }
    return explicit_ids;
  }
  return synthetic_tokens(seed, salt, len, vocab_size);
}

RelayMode mode_for(Strategy s) {
  switch (s) {
    case Strategy::kZero: return RelayMode::kZero;
    case Strategy::kRelay: return RelayMode::kRelay;
    case Strategy::kBlend: return RelayMode::kBlend;
    case Strategy::kFull: break;
  }
  return RelayMode::kFull;
}

}  // namespace

RunReport run_workflow(const Weights& w, const WorkflowSpec& spec, const LayerProfile& profile,
                       const RunOptions& opts) {
  spec.validate();
  opts.thresholds.validate();
  profile.validate(w.spec.num_layers);
  const ModelSpec& ms = w.spec;
  const std::size_t num_agents = spec.agents.size();

  RunReport rep;
  rep.model_id = w.model_id;
  rep.spec = spec;
  rep.thresholds = opts.thresholds;
  rep.blend_alpha = opts.blend_alpha;
  rep.profile_l_start = profile.l_start;
  rep.profile_l_det = profile.l_det;
  rep.profile_l_end = profile.l_end;

  std::vector<std::vector<TokenId>> outputs(num_agents);
  std::vector<RelayCache> caches(num_agents);

  for (std::size_t i = 0; i < num_agents; ++i) {
    const AgentSpec& a = spec.agents[i];
    const Strategy strat = a.upstream.empty()
                               ? Strategy::kFull
                               : opts.strategy_override.value_or(a.strategy);

    const auto prefix = resolve_tokens(a.prefix, a.prefix_len, spec.seed, (i << 8) | 1,
                                       ms.vocab_size);
    const auto suffix = resolve_tokens(a.suffix, a.suffix_len, spec.seed, (i << 8) | 2,
                                       ms.vocab_size);

    std::vector<TokenId> full_prompt = prefix;
    std::size_t segment_total = 0;
    for (std::size_t u : a.upstream) {
      full_prompt.insert(full_prompt.end(), outputs[u].begin(), outputs[u].end());
      segment_total += outputs[u].size();
    }
    full_prompt.insert(full_prompt.end(), suffix.begin(), suffix.end());

    AgentReport ar;
    ar.name = a.name.empty() ? "agent" + std::to_string(i) : a.name;
    ar.strategy = strat;
    ar.prompt_tokens = full_prompt.size();
    ar.segment_tokens = segment_total;

    MergedKVContext ctx;
    ctx.kv = KVContext(ms);
    std::vector<float> end_logits;

    if (strat == Strategy::kFull || a.upstream.empty()) {
      const auto t0 = Clock::now();
      const PrefillResult pr = prefill(w, full_prompt, ctx.kv, 0);
      const auto row = pr.logits.row(full_prompt.size() - 1);
      end_logits.assign(row.begin(), row.end());

      ReuseStats st;
      st.total_entries = ms.num_layers * segment_total;
      st.recomputed_entries = st.total_entries;
      st.reuse_rate = 0.0;
      st.flops_cost = flops_span_full(ms, 0, full_prompt.size());
      st.flops_full_equiv = st.flops_cost;
      st.wall.fresh_ms = ms_since(t0);
      st.wall.total_ms = st.wall.fresh_ms;
      ar.stats = st;
    } else {
      ReuseStats agg;
      double fresh_ms = 0.0;
      auto t0 = Clock::now();
      prefill(w, prefix, ctx.kv, 0);
      fresh_ms += ms_since(t0);
      agg.flops_cost += flops_span_full(ms, 0, prefix.size());
      agg.flops_full_equiv += flops_span_full(ms, 0, prefix.size());

      RelayOptions ropts;
      ropts.mode = mode_for(strat);
      ropts.thresholds = opts.thresholds;
      ropts.blend_alpha = opts.blend_alpha;

      RelayOutput last_seg;
      for (std::size_t u : a.upstream) {
        RelayOutput seg = relay_extend(w, ctx, caches[u], profile, ropts);
        agg.add(seg.stats);
        ar.selections.push_back(seg.selection);
        last_seg = std::move(seg);
      }

      if (!suffix.empty()) {
        const std::size_t base = ctx.kv.size();
        t0 = Clock::now();
        const PrefillResult sr = prefill(w, suffix, ctx.kv, base);
        fresh_ms += ms_since(t0);
        const auto row = sr.logits.row(suffix.size() - 1);
        end_logits.assign(row.begin(), row.end());
        agg.flops_cost += flops_span_full(ms, base, suffix.size());
        agg.flops_full_equiv += flops_span_full(ms, base, suffix.size());
      } else {
        // no instruction after the segment: recompute the last segment row
        // as a pure query from its deepest available hidden state
        const std::size_t n = last_seg.hidden_depth.size();
        const std::size_t depth = last_seg.hidden_depth[n - 1];
        const std::size_t pos = ctx.kv.size() - 1;
        Tensor logits;
        if (depth >= ms.num_layers) {
          Tensor last({1, ms.d_model});
          std::memcpy(last.row(0).data(), last_seg.segment_hidden.row(n - 1).data(),
                      ms.d_model * sizeof(float));
          logits = output_logits(w, last);
        } else {
          logits = row_logits_from_layer(w, last_seg.segment_hidden.row(n - 1), depth, ctx.kv,
                                         pos);
        }
        const auto row = logits.row(0);
        end_logits.assign(row.begin(), row.end());
      }
      agg.wall.fresh_ms += fresh_ms;
      agg.wall.total_ms += fresh_ms;
      ar.stats = agg;
    }
    ar.stats.check_identity();

    // decode this agent's output with capture so the next hop can relay it
    CaptureFlags cap;
    cap.hidden = true;
    cap.pre_rope_keys = true;
    cap.attention = true;
    RelayRecorder recorder(ms, ctx.kv.size(), profile.l_start);
    const StepHook hook = [&](const StepTrace& tr, TokenId tok, std::size_t pos) {
      recorder.feed(tr, tok, pos);
    };
    const GenerateResult gen =
        greedy_generate(w, ctx.kv, end_logits, a.max_new_tokens, cap, hook);
    outputs[i] = gen.tokens;
    caches[i] = recorder.finalize();
    ar.output = gen.tokens;

    // full-prefill oracle on identical inputs
    if (!opts.score_agreement) {
      ar.oracle_output.clear();
    } else if (strat == Strategy::kFull || a.upstream.empty()) {
      ar.oracle_output = outputs[i];
      ar.agreement_exact = 1.0;
    } else {
      KVContext octx(ms);
      const PrefillResult opr = prefill(w, full_prompt, octx, 0);
      const auto orow = opr.logits.row(full_prompt.size() - 1);
      std::vector<float> oracle_logits(orow.begin(), orow.end());
      const GenerateResult ogen =
          greedy_generate(w, octx, oracle_logits, a.max_new_tokens);
      ar.oracle_output = ogen.tokens;
      std::size_t matches = 0;
      for (std::size_t t = 0; t < a.max_new_tokens; ++t) {
        if (ar.output[t] == ar.oracle_output[t]) ++matches;
      }
      ar.agreement_exact = static_cast<double>(matches) / static_cast<double>(a.max_new_tokens);
      ar.first_logit_max_abs = max_abs_diff(oracle_logits, end_logits);
      ar.first_logit_kl = logit_kl(oracle_logits, end_logits);
    }

    rep.total_flops_cost += ar.stats.flops_total();
    rep.total_flops_full_equiv += ar.stats.flops_full_equiv;
    rep.agents.push_back(std::move(ar));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

namespace {

nlohmann::json selection_to_json(const SelectionSet& sel) {
  nlohmann::json arr = nlohmann::json::array();
  for (std::size_t i = 0; i < sel.indices.size(); ++i) {
    nlohmann::json tags = nlohmann::json::array();
    if (sel.tags[i] & kSelDeviation) tags.push_back("deviation");
    if (sel.tags[i] & kSelInfluenceScore) tags.push_back("influence_score");
    if (sel.tags[i] & kSelInfluenceSuffix) tags.push_back("influence_suffix");
    if (sel.tags[i] & kSelBlendTopK) tags.push_back("blend_topk");
    arr.push_back({{"index", sel.indices[i]}, {"tags", tags}});
  }
  return arr;
}

nlohmann::json stats_to_json(const ReuseStats& st, bool include_timings) {
  nlohmann::json j{
      {"total_entries", st.total_entries},
      {"recomputed_entries", st.recomputed_entries},
      {"reuse_rate", st.reuse_rate},
      {"selected_count", st.selected_count},
      {"selected_deviation", st.selected_deviation},
      {"selected_influence_score", st.selected_influence_score},
      {"selected_influence_suffix", st.selected_influence_suffix},
      {"selected_blend", st.selected_blend},
      {"flops_cost", st.flops_cost},
      {"flops_selection", st.flops_selection},
      {"flops_realign", st.flops_realign},
      {"flops_total", st.flops_total()},
      {"flops_full_equiv", st.flops_full_equiv},
  };
  if (include_timings) {
    j["wall_ms"] = {
        {"fresh", st.wall.fresh_ms},         {"realign", st.wall.realign_ms},
        {"recompute", st.wall.recompute_ms}, {"selection", st.wall.selection_ms},
        {"rectify", st.wall.rectify_ms},     {"total", st.wall.total_ms},
    };
  }
  return j;
}

}  // namespace

nlohmann::json report_to_json(const RunReport& rep, bool include_timings) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["model_id"] = rep.model_id;
  j["workflow"] = workflow_to_json(rep.spec);
  j["thresholds"] = {{"tau_dev", rep.thresholds.tau_dev},
                     {"tau_inf", rep.thresholds.tau_inf},
                     {"suffix_k", rep.thresholds.suffix_k}};
  j["blend_alpha"] = rep.blend_alpha;
  j["profile"] = {{"l_start", rep.profile_l_start},
                  {"l_det", rep.profile_l_det},
                  {"l_end", rep.profile_l_end}};
  j["agents"] = nlohmann::json::array();
  for (const AgentReport& a : rep.agents) {
    nlohmann::json ja;
    ja["name"] = a.name;
    ja["strategy"] = strategy_name(a.strategy);
    ja["prompt_tokens"] = a.prompt_tokens;
    ja["segment_tokens"] = a.segment_tokens;
    ja["stats"] = stats_to_json(a.stats, include_timings);
    ja["selections"] = nlohmann::json::array();
    for (const SelectionSet& s : a.selections) ja["selections"].push_back(selection_to_json(s));
    ja["agreement_exact"] = a.agreement_exact;
    ja["first_logit_max_abs"] = a.first_logit_max_abs;
    ja["first_logit_kl"] = a.first_logit_kl;
    ja["output"] = a.output;
    ja["oracle_output"] = a.oracle_output;
    j["agents"].push_back(std::move(ja));
  }
  j["totals"] = {{"flops_cost", rep.total_flops_cost},
                 {"flops_full_equiv", rep.total_flops_full_equiv}};
  return j;
}

void report_csv(const RunReport& rep, std::ostream& os) {
  os << "agent,name,strategy,prompt_tokens,segment_tokens,total_entries,recomputed_entries,"
        "reuse_rate,selected_count,flops_cost,flops_selection,flops_realign,flops_full_equiv,"
        "agreement_exact,first_logit_max_abs,first_logit_kl\n";
  for (std::size_t i = 0; i < rep.agents.size(); ++i) {
    const AgentReport& a = rep.agents[i];
    os << i << ',' << a.name << ',' << strategy_name(a.strategy) << ',' << a.prompt_tokens
       << ',' << a.segment_tokens << ',' << a.stats.total_entries << ','
       << a.stats.recomputed_entries << ',' << fmt_g(a.stats.reuse_rate) << ','
       << a.stats.selected_count << ',' << fmt_g(a.stats.flops_cost) << ','
       << fmt_g(a.stats.flops_selection) << ',' << fmt_g(a.stats.flops_realign) << ','
       << fmt_g(a.stats.flops_full_equiv) << ',' << fmt_g(a.agreement_exact) << ','
       << fmt_g(a.first_logit_max_abs) << ',' << fmt_g(a.first_logit_kl) << '\n';
  }
}

// ---------------------------------------------------------------------------
// observe
// ---------------------------------------------------------------------------

namespace {

// Mean similarity (1 - deviation) over all cells of one metric.
double macro_mean(const DeviationMatrix& dev, MetricKind kind) {
  double acc = 0.0;
  for (std::size_t j = 0; j < dev.segment_len; ++j) {
    for (std::size_t l = 0; l < dev.num_layers; ++l) acc += 1.0 - dev.at(kind, j, l);
  }
  return acc / static_cast<double>(dev.segment_len * dev.num_layers);
}

struct SweepAccum {
  std::vector<double> up_to, from;
};

// Replaces segment rows of `ctx` with the stale (realigned decode) KV at
// every layer the substitution does not cover, then measures how well the
// values of the suffix tokens match the all-fresh reference.
double sweep_recovery(const Weights& w, const KVContext& full_ctx,
                      const std::vector<Tensor>& ref_suffix_v, const RelayCache& cache,
                      const RealignedKeys& stale_keys, std::size_t seg_base,
                      std::span<const TokenId> suffix, std::size_t sub_lo, std::size_t sub_hi) {
  const ModelSpec& spec = w.spec;
  const std::size_t n = cache.segment_len();
  KVContext hybrid = full_ctx;
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    if (l >= sub_lo && l <= sub_hi) continue;  // substituted: keep full-prefill KV
    for (std::size_t j = 0; j < n; ++j) {
      std::memcpy(hybrid.key_row(l, seg_base + j).data(), stale_keys.k[l].row(j).data(),
                  spec.kv_dim() * sizeof(float));
      std::memcpy(hybrid.value_row(l, seg_base + j).data(), cache.v[l].row(j).data(),
                  spec.kv_dim() * sizeof(float));
    }
  }
  const std::size_t suffix_base = seg_base + n;
  prefill(w, suffix, hybrid, suffix_base);

  double acc = 0.0;
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    for (std::size_t j = 0; j < suffix.size(); ++j) {
      acc += 1.0 - mean_head_cosine_deviation(hybrid.value_row(l, suffix_base + j),
                                              ref_suffix_v[l].row(j), spec.num_kv_heads);
    }
  }
  return acc / static_cast<double>(spec.num_layers * suffix.size());
}

void sweep_instance(const Weights& w, const TwoStageInstance& inst, SweepAccum& accum) {
  const ModelSpec& spec = w.spec;
  const std::size_t seg_base = inst.stage2_prefix.size();
  const std::size_t n = inst.segment.size();

  std::vector<TokenId> prompt = inst.stage2_prefix;
  prompt.insert(prompt.end(), inst.segment.begin(), inst.segment.end());
  KVContext full_ctx(spec);
  prefill(w, prompt, full_ctx, 0);

  // all-fresh reference values for the suffix rows
  KVContext ref_ctx = full_ctx;
  prefill(w, inst.stage2_suffix, ref_ctx, seg_base + n);
  std::vector<Tensor> ref_suffix_v(spec.num_layers);
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    ref_suffix_v[l] = Tensor({inst.stage2_suffix.size(), spec.kv_dim()});
    for (std::size_t j = 0; j < inst.stage2_suffix.size(); ++j) {
      std::memcpy(ref_suffix_v[l].row(j).data(),
                  ref_ctx.value_row(l, seg_base + n + j).data(),
                  spec.kv_dim() * sizeof(float));
    }
  }

  const RealignedKeys stale = realign(inst.cache, seg_base);
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    accum.up_to[l] += sweep_recovery(w, full_ctx, ref_suffix_v, inst.cache, stale, seg_base,
                                     inst.stage2_suffix, 0, l);
    accum.from[l] += sweep_recovery(w, full_ctx, ref_suffix_v, inst.cache, stale, seg_base,
                                    inst.stage2_suffix, l, spec.num_layers - 1);
  }
}

}  // namespace

ObserveResult observe(const Weights& w, const TwoStageConfig& cfg) {
  cfg.validate();
  const ModelSpec& spec = w.spec;
  const std::size_t layers = spec.num_layers;
  const ComparisonSetting settings[3] = {ComparisonSetting::kDecoding,
                                         ComparisonSetting::kRandom,
                                         ComparisonSetting::kIndependent};
  const MetricKind kinds[4] = {MetricKind::kValueCos, MetricKind::kKeyCos,
                               MetricKind::kValueNorm, MetricKind::kKeyNorm};

  ObserveResult res;
  res.macro.resize(3);
  std::vector<SettingCurves> curve_acc(3);
  for (std::size_t s = 0; s < 3; ++s) {
    res.macro[s].setting = settings[s];
    curve_acc[s].s_value_cos.assign(layers, 0.0);
    curve_acc[s].s_key_cos.assign(layers, 0.0);
    curve_acc[s].s_value_norm.assign(layers, 0.0);
    curve_acc[s].s_key_norm.assign(layers, 0.0);
    curve_acc[s].rho.assign(layers, 0.0);
  }
  res.token_profile.assign(cfg.segment_len, 0.0);
  SweepAccum sweep_acc;
  sweep_acc.up_to.assign(layers, 0.0);
  sweep_acc.from.assign(layers, 0.0);
  const std::size_t sweep_count = std::min(cfg.sweep_instances, cfg.instances);

  for (std::size_t idx = 0; idx < cfg.instances; ++idx) {
    TwoStageInstance inst;
    try {
      inst = make_two_stage_instance(w, cfg, idx);
      for (std::size_t s = 0; s < 3; ++s) {
        const ComparisonPair pair = build_comparison_setting(w, inst, settings[s]);
        const DeviationMatrix dev = token_deviation(pair.reuse, pair.full, spec.num_kv_heads);

        res.macro[s].value_cos += macro_mean(dev, MetricKind::kValueCos);
        res.macro[s].key_cos += macro_mean(dev, MetricKind::kKeyCos);
        res.macro[s].value_norm += macro_mean(dev, MetricKind::kValueNorm);
        res.macro[s].key_norm += macro_mean(dev, MetricKind::kKeyNorm);

        for (std::size_t k = 0; k < 4; ++k) {
          const auto sim = layer_similarity(dev, kinds[k]);
          auto& dst = k == 0   ? curve_acc[s].s_value_cos
                      : k == 1 ? curve_acc[s].s_key_cos
                      : k == 2 ? curve_acc[s].s_value_norm
                               : curve_acc[s].s_key_norm;
          for (std::size_t l = 0; l < layers; ++l) dst[l] += sim[l];
        }
        const LayerCurve lc = make_layer_curve(dev);
        for (std::size_t l = 1; l < layers; ++l) {
          curve_acc[s].rho[l] += lc.rho_degenerate[l] ? 0.0 : lc.rho[l];
        }

        if (settings[s] == ComparisonSetting::kDecoding) {
          for (std::size_t j = 0; j < dev.segment_len && j < res.token_profile.size(); ++j) {
            double acc = 0.0;
            for (std::size_t l = 0; l < layers; ++l) {
              acc += 1.0 - dev.at(MetricKind::kValueCos, j, l);
            }
            res.token_profile[j] += acc / static_cast<double>(layers);
          }
        }
      }
      if (idx < sweep_count) sweep_instance(w, inst, sweep_acc);
    } catch (const std::exception& e) {
      throw std::runtime_error("observe instance " + std::to_string(idx) + ": " + e.what());
    }
  }

  const double inv = 1.0 / static_cast<double>(cfg.instances);
  for (std::size_t s = 0; s < 3; ++s) {
    res.macro[s].value_cos *= inv;
    res.macro[s].key_cos *= inv;
    res.macro[s].value_norm *= inv;
    res.macro[s].key_norm *= inv;
    for (std::size_t l = 0; l < layers; ++l) {
      curve_acc[s].s_value_cos[l] *= inv;
      curve_acc[s].s_key_cos[l] *= inv;
      curve_acc[s].s_value_norm[l] *= inv;
      curve_acc[s].s_key_norm[l] *= inv;
      curve_acc[s].rho[l] *= inv;
    }
    res.curves.emplace_back(settings[s], std::move(curve_acc[s]));
  }
  for (double& v : res.token_profile) v *= inv;
  if (sweep_count > 0) {
    res.sweep.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      res.sweep[l].layer = l;
      res.sweep[l].recovery_up_to = sweep_acc.up_to[l] / static_cast<double>(sweep_count);
      res.sweep[l].recovery_from = sweep_acc.from[l] / static_cast<double>(sweep_count);
    }
  }
  return res;
}

namespace {

const char* setting_name(ComparisonSetting s) {
  switch (s) {
    case ComparisonSetting::kDecoding: return "decoding";
    case ComparisonSetting::kRandom: return "random";
    case ComparisonSetting::kIndependent: return "independent";
  }
  return "decoding";
}

}  // namespace

void write_observe_csv(const ObserveResult& res, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  {
    std::ofstream f(dir / "macro_similarity.csv");
    if (!f) throw IoError("cannot write macro_similarity.csv");
    f << "setting,value_cos,key_cos,value_norm,key_norm\n";
    for (const MacroRow& m : res.macro) {
      f << setting_name(m.setting) << ',' << fmt_g(m.value_cos) << ',' << fmt_g(m.key_cos)
        << ',' << fmt_g(m.value_norm) << ',' << fmt_g(m.key_norm) << '\n';
    }
  }

  for (const auto& [setting, c] : res.curves) {
    std::ofstream f(dir / ("layer_curves_" + std::string(setting_name(setting)) + ".csv"));
    if (!f) throw IoError("cannot write layer curve csv");
    f << "layer,s_value_cos,s_key_cos,s_value_norm,s_key_norm,rho\n";
    for (std::size_t l = 0; l < c.s_value_cos.size(); ++l) {
      f << l << ',' << fmt_g(c.s_value_cos[l]) << ',' << fmt_g(c.s_key_cos[l]) << ','
        << fmt_g(c.s_value_norm[l]) << ',' << fmt_g(c.s_key_norm[l]) << ',';
      if (l >= 1) f << fmt_g(c.rho[l]);  // rho is undefined at layer 0
      f << '\n';
    }
  }

  {
    std::ofstream f(dir / "token_profile.csv");
    if (!f) throw IoError("cannot write token_profile.csv");
    f << "position,value_cos\n";
    for (std::size_t j = 0; j < res.token_profile.size(); ++j) {
      f << j << ',' << fmt_g(res.token_profile[j]) << '\n';
    }
  }

  {
    std::ofstream f(dir / "substitution_sweep.csv");
    if (!f) throw IoError("cannot write substitution_sweep.csv");
    f << "layer,recovery_up_to,recovery_from\n";
    for (const SweepRow& r : res.sweep) {
      f << r.layer << ',' << fmt_g(r.recovery_up_to) << ',' << fmt_g(r.recovery_from) << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

std::vector<BenchRow> bench_lengths(const Weights& w, std::span<const std::size_t> lengths,
                                    std::size_t num_agents, std::span<const Strategy> strategies,
                                    const LayerProfile& profile,
                                    const SelectionThresholds& thresholds, std::uint64_t seed) {
  if (num_agents < 2) throw std::invalid_argument("bench: need at least 2 agents");
  std::vector<BenchRow> rows;
  for (const std::size_t length : lengths) {
    const std::size_t per_agent = std::max<std::size_t>(1, length / num_agents);
    WorkflowSpec spec;
    spec.seed = seed + length;
    for (std::size_t i = 0; i < num_agents; ++i) {
      AgentSpec a;
      a.name = "agent" + std::to_string(i);
      a.prefix_len = i == 0 ? 32 : 16;
      a.suffix_len = i == 0 ? 0 : 8;
      a.max_new_tokens = per_agent;
      for (std::size_t u = 0; u < i; ++u) a.upstream.push_back(u);
      spec.agents.push_back(std::move(a));
    }

    for (const Strategy strat : strategies) {
      RunOptions opts;
      opts.thresholds = thresholds;
      opts.strategy_override = strat;
      opts.score_agreement = false;
      const RunReport rep = run_workflow(w, spec, profile, opts);
      for (std::size_t i = 1; i < rep.agents.size(); ++i) {
        const AgentReport& a = rep.agents[i];
        BenchRow row;
        row.cumulative_len = length;
        row.agent = i;
        row.strategy = strat;
        row.prompt_tokens = a.prompt_tokens;
        row.segment_tokens = a.segment_tokens;
        row.flops_cost = a.stats.flops_cost;
        row.flops_total = a.stats.flops_total();
        row.flops_full_equiv = a.stats.flops_full_equiv;
        row.reuse_rate = a.stats.reuse_rate;
        row.prefill_wall_ms = a.stats.wall.total_ms;
        rows.push_back(row);
      }
    }
  }
  return rows;
}

void bench_csv(std::span<const BenchRow> rows, std::ostream& os) {
  os << "cumulative_len,agent,strategy,prompt_tokens,segment_tokens,flops_cost,flops_total,"
        "flops_full_equiv,reuse_rate,prefill_wall_ms\n";
  for (const BenchRow& r : rows) {
    os << r.cumulative_len << ',' << r.agent << ',' << strategy_name(r.strategy) << ','
       << r.prompt_tokens << ',' << r.segment_tokens << ',' << fmt_g(r.flops_cost) << ','
       << fmt_g(r.flops_total) << ',' << fmt_g(r.flops_full_equiv) << ','
       << fmt_g(r.reuse_rate) << ',' << fmt_g(r.prefill_wall_ms) << '\n';
  }
}

}  // namespace relaykv
