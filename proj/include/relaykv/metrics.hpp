// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relaykv/model.hpp"
#include "relaykv/relay_cache.hpp"

namespace relaykv {

// Similarity and deviation statistics between a reused segment's KV and a
// freshly prefilled reference of the same tokens. All statistics here are
// computed in double precision with plain left-to-right loops so a naive
// re-derivation in test code reproduces them bit for bit.

// Per-layer segment KV, pre-rotation keys. N x kv_dim per layer.
struct SegmentKV {
  std::vector<Tensor> k_pre;
  std::vector<Tensor> v;
};

enum class MetricKind { kValueCos, kKeyCos, kValueNorm, kKeyNorm };

// N x L deviation matrices, stored row-major [position][layer].
// Cosine flavors hold 1 - mean-over-heads cosine (range [0, 2]); norm
// flavors hold 1 - mean-over-heads min/max norm ratio (range [0, 1]).
// Bit-equal inputs produce exact zeros.
struct DeviationMatrix {
  std::size_t segment_len = 0;
  std::size_t num_layers = 0;
  std::vector<double> value_cos, key_cos, value_norm, key_norm;

  double at(MetricKind kind, std::size_t pos, std::size_t layer) const;
  std::vector<double> layer_column(MetricKind kind, std::size_t layer) const;
  std::vector<double> position_row(MetricKind kind, std::size_t pos) const;
};

// Per-position, per-layer deviation between the reuse-side KV and the
// full-prefill reference. Head count is taken from the stored KV layout.
DeviationMatrix token_deviation(const SegmentKV& reuse, const SegmentKV& full,
                                std::size_t num_kv_heads);

// 1 - mean-over-heads cosine between two rows split into `heads` slices.
// Exactly 0 for bit-identical rows.
double mean_head_cosine_deviation(std::span<const float> a, std::span<const float> b,
                                  std::size_t heads);
// 1 - mean-over-heads min/max norm ratio.
double mean_head_norm_ratio_deviation(std::span<const float> a, std::span<const float> b,
                                      std::size_t heads);

// Mean over positions of (1 - deviation), one value per layer.
std::vector<double> layer_similarity(const DeviationMatrix& dev,
                                     MetricKind kind = MetricKind::kValueCos);

struct SpearmanResult {
  double rho = 0.0;
  bool degenerate = false;  // constant input; rho forced to 0
};

// Rank correlation with average ranks for ties.
SpearmanResult spearman(std::span<const double> x, std::span<const double> y);

// s[l] per Eq.-style layer similarity; rho[l] (l >= 1) is the Spearman
// correlation of value-cosine deviations between layers l-1 and l. rho[0]
// is NaN and flagged degenerate.
struct LayerCurve {
  std::vector<double> s;
  std::vector<double> rho;
  std::vector<bool> rho_degenerate;
};
LayerCurve make_layer_curve(const DeviationMatrix& dev);

// Pointwise arithmetic mean of curves (degenerate rho entries contribute 0,
// matching their stored value).
LayerCurve average_curves(std::span<const LayerCurve> curves);

// ---------------------------------------------------------------------------
// comparison settings: where the reuse-side KV comes from
// ---------------------------------------------------------------------------

enum class ComparisonSetting {
  kDecoding,     // KV captured while decoding the segment under the old prefix
  kRandom,       // fresh prefill with the segment replaced by random tokens
  kIndependent,  // fresh prefill of the segment alone at base position 0
};

// Two-stage workload: stage 1 decodes a segment under one prompt; stage 2
// embeds that segment verbatim under a new prefix.
struct TwoStageConfig {
  std::uint64_t seed = 1;
  std::size_t instances = 8;
  std::size_t stage1_prefix_min = 32, stage1_prefix_max = 64;
  std::size_t stage2_prefix_min = 24, stage2_prefix_max = 72;
  std::size_t segment_len = 48;
  std::size_t stage2_suffix_len = 16;
  std::size_t sweep_instances = 2;  // instances used for substitution sweeps
  bool identical_prefix = false;    // stage 2 reuses the stage-1 prefix verbatim
  std::size_t snapshot_layer = 0;

  void validate() const;
};

struct TwoStageInstance {
  std::vector<TokenId> stage1_prefix;
  std::vector<TokenId> segment;        // greedy stage-1 output
  std::vector<TokenId> stage2_prefix;  // the shifted prefix
  std::vector<TokenId> stage2_suffix;  // tokens appended after the segment
  RelayCache cache;                    // decode-time capture of the segment
  std::uint64_t instance_seed = 0;
};

// Runs stage 1 (greedy decode with capture) and fixes the stage-2 prompt.
TwoStageInstance make_two_stage_instance(const Weights& w, const TwoStageConfig& cfg,
                                         std::size_t index);

// Reuse-side KV per the setting; reference side is always the full prefill
// of (stage-2 prefix + segment). Both sides carry pre-rotation keys so the
// comparison is position-free.
struct ComparisonPair {
  SegmentKV reuse;
  SegmentKV full;
};
ComparisonPair build_comparison_setting(const Weights& w, const TwoStageInstance& inst,
                                        ComparisonSetting setting);

// Deterministic synthetic token stream (shared by workloads and workflows).
std::vector<TokenId> synthetic_tokens(std::uint64_t seed, std::uint64_t salt,
                                      std::size_t count, std::size_t vocab_size);
std::size_t pick_length(std::uint64_t seed, std::uint64_t salt, std::size_t lo, std::size_t hi);

// Extracts segment rows [base, base+len) of a capture trace into SegmentKV.
SegmentKV segment_kv_from_trace(const StepTrace& trace, std::size_t base, std::size_t len);

}  // namespace relaykv
