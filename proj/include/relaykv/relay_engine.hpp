// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relaykv/model.hpp"
#include "relaykv/profiler.hpp"
#include "relaykv/relay_cache.hpp"
#include "relaykv/selector.hpp"

namespace relaykv {

enum class RelayMode {
  kFull,   // ignore the cache, recompute everything
  kZero,   // graft realigned cache KV at every layer, recompute nothing
  kRelay,  // band recompute + one-shot selection + sparse rectification
  kBlend,  // two bootstrap layers + top-alpha rows at all remaining layers
};

enum class CellOrigin : std::uint8_t { kReused = 0, kRecomputed = 1 };

// One relayed segment inside a merged context: where it sits and which
// (layer, position) cells were recomputed. origin is layer-major, L x len.
struct SegmentMarks {
  std::size_t base = 0;
  std::size_t len = 0;
  std::vector<CellOrigin> origin;

  CellOrigin at(std::size_t layer, std::size_t j) const { return origin[layer * len + j]; }
  std::size_t recomputed() const;
};

struct MergedKVContext {
  KVContext kv;
  std::vector<SegmentMarks> segments;
};

struct PhaseTimings {
  double fresh_ms = 0.0;      // fresh token spans (prefix / suffix prefill)
  double realign_ms = 0.0;
  double recompute_ms = 0.0;  // full-recompute band
  double selection_ms = 0.0;  // index selection
  double rectify_ms = 0.0;    // sparse token-selective pass
  double total_ms = 0.0;
};

// Per-segment (and, summed, per-agent) reuse accounting. One cell is one
// (layer, position) K/V pair of the segment.
struct ReuseStats {
  std::size_t total_entries = 0;
  std::size_t recomputed_entries = 0;
  double reuse_rate = 0.0;  // 1 - recomputed/total; 0 when there is no segment
  std::size_t selected_count = 0;
  std::size_t selected_deviation = 0;
  std::size_t selected_influence_score = 0;
  std::size_t selected_influence_suffix = 0;
  std::size_t selected_blend = 0;
  double flops_cost = 0.0;       // prefix + recompute schedule (analytic)
  double flops_selection = 0.0;  // index-selection overhead, reported apart
  double flops_realign = 0.0;    // key re-rotation, reported apart
  double flops_full_equiv = 0.0;
  PhaseTimings wall;

  double flops_total() const { return flops_cost + flops_selection + flops_realign; }
  void add(const ReuseStats& other);
  void check_identity() const;  // recomputed + reused == total
};

// ---------------------------------------------------------------------------
// Analytic FLOP model (multiply+add counted as 2):
//
//   projections per token per layer:  2*d_model*(2*d_model + 2*kv_dim)
//   attention for a query with causal context c:  4*c*d_head*H
//   gated MLP per token per layer:    6*d_model*d_ff
//
//   full prefill of tokens [base, base+n):
//     sum over tokens of L*(proj + mlp) + L*attn(pos+1)
//
//   relay schedule for a segment of n rows at base b with m selected rows:
//     band layers (l_det - l_start + 1): every row, exact causal contexts
//     sparse layers (l_end - l_det):     m rows at the mean causal context
//                                        b + (n+1)/2  (exact when m == n)
//
//   realign: 3*kv_dim flops per row per layer (one 2x2 rotation per pair).
//   selection: n*(6*kv_dim + 10) + 4*n  (per-head cosines + thresholding).
//
// flops_cost covers prefix + schedule; realign and selection are reported
// as separate fields so the schedule cost of a select-all full-range relay
// equals the full-prefill cost exactly.
// ---------------------------------------------------------------------------

double flops_proj_mlp_per_token_layer(const ModelSpec& spec);
double flops_attn_term(const ModelSpec& spec, std::size_t base, std::size_t n);
double flops_span_full(const ModelSpec& spec, std::size_t base, std::size_t n);
double flops_segment_schedule(const ModelSpec& spec, std::size_t base, std::size_t n,
                              std::size_t band_lo, std::size_t band_hi, std::size_t sparse_hi,
                              std::size_t selected);
double flops_selection_overhead(const ModelSpec& spec, std::size_t n);
double flops_realign_cost(const ModelSpec& spec, std::size_t n);

struct FlopEstimate {
  double relay = 0.0;
  double selection = 0.0;
  double realign = 0.0;
  double full_equiv = 0.0;
};
FlopEstimate flops_estimate(const ModelSpec& spec, std::size_t prefix_len,
                            std::size_t segment_len, const LayerProfile& profile,
                            std::size_t selected_count);

// ---------------------------------------------------------------------------
// relay prefill
// ---------------------------------------------------------------------------

struct RelayOptions {
  RelayMode mode = RelayMode::kRelay;
  SelectionThresholds thresholds;
  double blend_alpha = 0.2;
  // Ablation switch: keep recomputing selected rows above l_end instead of
  // reusing the relay KV there.
  bool rectify_above_end = false;
};

struct RelayOutput {
  ReuseStats stats;
  SelectionSet selection;
  std::vector<double> s_dev;      // value deviation at the detection layer
  std::vector<double> s_key_dev;  // key deviation there (logged, unused)
  // Segment-row hidden states as the schedule left them; hidden_depth[j] is
  // the number of layers applied to row j (0 = embedding / snapshot input).
  Tensor segment_hidden;
  std::vector<std::size_t> hidden_depth;
};

// Appends one relayed segment to an existing merged context. The context
// must already hold every earlier position; the segment lands at
// ctx.kv.size().
RelayOutput relay_extend(const Weights& w, MergedKVContext& ctx, const RelayCache& cache,
                         const LayerProfile& profile, const RelayOptions& opts);

struct RelayPrefillResult {
  MergedKVContext ctx;
  RelayOutput segment;
  Tensor segment_end_logits;  // 1 x vocab, next-token logits after the segment
};

// Fresh prefill of the prefix followed by relay_extend, plus next-token
// logits at the segment end: the last segment row is propagated to the top
// as a pure query from its deepest computed hidden state (a full-cache-hit
// style recompute of the final position).
RelayPrefillResult relay_prefill(const Weights& w, std::span<const TokenId> prefix,
                                 const RelayCache& cache, const LayerProfile& profile,
                                 const RelayOptions& opts);

// CacheBlend-style reference: bootstrap layers 0..1 for every row, rank rows
// by the L2 norm of the fresh-vs-relay value difference at layer 1, then
// recompute the top floor(alpha*n) rows at all remaining layers.
RelayPrefillResult blend_baseline(const Weights& w, std::span<const TokenId> prefix,
                                  const RelayCache& cache, double alpha);

}  // namespace relaykv
