// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/relay_engine.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "relaykv/metrics.hpp"

namespace relaykv {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

}  // namespace

std::size_t SegmentMarks::recomputed() const {
  std::size_t n = 0;
  for (CellOrigin o : origin) {
    if (o == CellOrigin::kRecomputed) ++n;
  }
  return n;
}

void ReuseStats::add(const ReuseStats& other) {
  total_entries += other.total_entries;
  recomputed_entries += other.recomputed_entries;
  reuse_rate = total_entries == 0
                   ? 0.0
                   : 1.0 - static_cast<double>(recomputed_entries) /
                               static_cast<double>(total_entries);
  selected_count += other.selected_count;
  selected_deviation += other.selected_deviation;
  selected_influence_score += other.selected_influence_score;
  selected_influence_suffix += other.selected_influence_suffix;
  selected_blend += other.selected_blend;
  flops_cost += other.flops_cost;
  flops_selection += other.flops_selection;
  flops_realign += other.flops_realign;
  flops_full_equiv += other.flops_full_equiv;
  wall.fresh_ms += other.wall.fresh_ms;
  wall.realign_ms += other.wall.realign_ms;
  wall.recompute_ms += other.wall.recompute_ms;
  wall.selection_ms += other.wall.selection_ms;
  wall.rectify_ms += other.wall.rectify_ms;
  wall.total_ms += other.wall.total_ms;
}

void ReuseStats::check_identity() const {
  if (recomputed_entries > total_entries) {
    throw std::logic_error("reuse stats: recomputed exceeds total");
  }
  const double expect = total_entries == 0
                            ? 0.0
                            : 1.0 - static_cast<double>(recomputed_entries) /
                                        static_cast<double>(total_entries);
  if (reuse_rate != expect) throw std::logic_error("reuse stats: rate/count mismatch");
}

// ---------------------------------------------------------------------------
// FLOP model
// ---------------------------------------------------------------------------

double flops_proj_mlp_per_token_layer(const ModelSpec& spec) {
  const double d = static_cast<double>(spec.d_model);
  const double kv = static_cast<double>(spec.kv_dim());
  const double ff = static_cast<double>(spec.d_ff);
  return 2.0 * d * (2.0 * d + 2.0 * kv) + 6.0 * d * ff;
}

double flops_attn_term(const ModelSpec& spec, std::size_t base, std::size_t n) {
  const double b = static_cast<double>(base), nn = static_cast<double>(n);
  const double dhH = static_cast<double>(spec.d_head * spec.num_heads);
  return 4.0 * dhH * (nn * b + nn * (nn + 1.0) / 2.0);
}

double flops_span_full(const ModelSpec& spec, std::size_t base, std::size_t n) {
  const double layers = static_cast<double>(spec.num_layers);
  return layers * static_cast<double>(n) * flops_proj_mlp_per_token_layer(spec) +
         layers * flops_attn_term(spec, base, n);
}

double flops_segment_schedule(const ModelSpec& spec, std::size_t base, std::size_t n,
                              std::size_t band_lo, std::size_t band_hi, std::size_t sparse_hi,
                              std::size_t selected) {
  const double pm = flops_proj_mlp_per_token_layer(spec);
  const double band_layers = static_cast<double>(band_hi - band_lo + 1);
  const double sparse_layers = static_cast<double>(sparse_hi - band_hi);
  const double dhH = static_cast<double>(spec.d_head * spec.num_heads);
  const double avg_ctx = static_cast<double>(base) + (static_cast<double>(n) + 1.0) / 2.0;
  const double band = band_layers * (static_cast<double>(n) * pm + flops_attn_term(spec, base, n));
  const double sparse =
      sparse_layers * static_cast<double>(selected) * (pm + 4.0 * dhH * avg_ctx);
  return band + sparse;
}

double flops_selection_overhead(const ModelSpec& spec, std::size_t n) {
  const double nn = static_cast<double>(n);
  const double kv = static_cast<double>(spec.kv_dim());
  return nn * (6.0 * kv + 10.0) + 4.0 * nn;
}

double flops_realign_cost(const ModelSpec& spec, std::size_t n) {
  return 3.0 * static_cast<double>(spec.kv_dim()) * static_cast<double>(n) *
         static_cast<double>(spec.num_layers);
}

FlopEstimate flops_estimate(const ModelSpec& spec, std::size_t prefix_len,
                            std::size_t segment_len, const LayerProfile& profile,
                            std::size_t selected_count) {
  profile.validate(spec.num_layers);
  FlopEstimate est;
  est.relay = flops_span_full(spec, 0, prefix_len) +
              flops_segment_schedule(spec, prefix_len, segment_len, profile.l_start,
                                     profile.l_det, profile.l_end, selected_count);
  est.selection = flops_selection_overhead(spec, segment_len);
  est.realign = flops_realign_cost(spec, segment_len);
  est.full_equiv = flops_span_full(spec, 0, prefix_len + segment_len);
  return est;
}

// ---------------------------------------------------------------------------
// relay extend
// ---------------------------------------------------------------------------

namespace {

void graft_realigned(KVContext& kv, const RelayCache& cache, const RealignedKeys& keys,
                     std::size_t base) {
  const std::size_t n = cache.segment_len();
  const std::size_t width = cache.kv_dim();
  for (std::size_t l = 0; l < cache.num_layers(); ++l) {
    for (std::size_t j = 0; j < n; ++j) {
      std::memcpy(kv.key_row(l, base + j).data(), keys.k[l].row(j).data(),
                  width * sizeof(float));
      std::memcpy(kv.value_row(l, base + j).data(), cache.v[l].row(j).data(),
                  width * sizeof(float));
    }
  }
}

void mark_layer(SegmentMarks& marks, std::size_t layer, CellOrigin origin) {
  for (std::size_t j = 0; j < marks.len; ++j) marks.origin[layer * marks.len + j] = origin;
}

// Sparse pass: advance only the selected rows through layers
// (band_hi, sparse_hi], committing their fresh K/V over the grafted cells.
void sparse_rectify(const Weights& w, Tensor& hidden, std::vector<std::size_t>& depth,
                    const SelectionSet& selection, std::size_t base, std::size_t band_hi,
                    std::size_t sparse_hi, KVContext& kv, SegmentMarks& marks) {
  if (selection.indices.empty() || sparse_hi <= band_hi) return;
  const std::size_t d_model = hidden.cols();
  Tensor sub({selection.indices.size(), d_model});
  std::vector<std::size_t> positions(selection.indices.size());
  for (std::size_t r = 0; r < selection.indices.size(); ++r) {
    std::memcpy(sub.row(r).data(), hidden.row(selection.indices[r]).data(),
                d_model * sizeof(float));
    positions[r] = base + selection.indices[r];
  }
  for (std::size_t l = band_hi + 1; l <= sparse_hi; ++l) {
    run_layer_rows(w, l, sub, positions, kv);
    for (std::size_t r = 0; r < selection.indices.size(); ++r) {
      marks.origin[l * marks.len + selection.indices[r]] = CellOrigin::kRecomputed;
    }
  }
  for (std::size_t r = 0; r < selection.indices.size(); ++r) {
    std::memcpy(hidden.row(selection.indices[r]).data(), sub.row(r).data(),
                d_model * sizeof(float));
    depth[selection.indices[r]] = sparse_hi + 1;
  }
}

}  // namespace

RelayOutput relay_extend(const Weights& w, MergedKVContext& ctx, const RelayCache& cache,
                         const LayerProfile& profile, const RelayOptions& opts) {
  const ModelSpec& spec = w.spec;
  cache.validate_for(spec);
  const std::size_t n = cache.segment_len();
  const std::size_t base = ctx.kv.size();
  const std::size_t layers = spec.num_layers;
  if (base + n > spec.max_positions) {
    throw std::invalid_argument("relay_extend: segment overflows max_positions");
  }
  if (ctx.kv.num_layers() == 0) ctx.kv = KVContext(spec);

  const auto t_total = Clock::now();
  RelayOutput out;
  SegmentMarks marks;
  marks.base = base;
  marks.len = n;
  marks.origin.assign(layers * n, CellOrigin::kReused);

  ReuseStats& st = out.stats;
  st.total_entries = layers * n;
  st.flops_full_equiv = flops_span_full(spec, base, n);

  std::vector<std::size_t> positions(n);
  for (std::size_t j = 0; j < n; ++j) positions[j] = base + j;

  switch (opts.mode) {
    case RelayMode::kFull: {
      ctx.kv.resize(base + n);
      out.segment_hidden = embed_tokens(w, cache.segment_tokens);
      const auto t0 = Clock::now();
      for (std::size_t l = 0; l < layers; ++l) {
        run_layer_rows(w, l, out.segment_hidden, positions, ctx.kv);
        mark_layer(marks, l, CellOrigin::kRecomputed);
      }
      st.wall.recompute_ms = ms_since(t0);
      out.hidden_depth.assign(n, layers);
      st.flops_cost = flops_span_full(spec, base, n);
      break;
    }

    case RelayMode::kZero: {
      const auto t0 = Clock::now();
      const RealignedKeys keys = realign(cache, base);
      ctx.kv.resize(base + n);
      graft_realigned(ctx.kv, cache, keys, base);
      st.wall.realign_ms = ms_since(t0);
      out.segment_hidden = cache.hidden_snapshot;
      out.hidden_depth.assign(n, cache.snapshot_layer);
      st.flops_realign = flops_realign_cost(spec, n);
      break;
    }

    case RelayMode::kRelay: {
      profile.validate(spec.num_layers);
      opts.thresholds.validate();
      if (cache.snapshot_layer != profile.l_start) {
        throw std::invalid_argument(
            "relay_extend: cache snapshot layer " + std::to_string(cache.snapshot_layer) +
            " does not match profile l_start " + std::to_string(profile.l_start));
      }
      const std::size_t l_start = profile.l_start;
      const std::size_t l_det = profile.l_det;
      const std::size_t l_end = profile.l_end;
      const std::size_t sparse_hi = opts.rectify_above_end ? layers - 1 : l_end;

      auto t0 = Clock::now();
      const RealignedKeys keys = realign(cache, base);
      ctx.kv.resize(base + n);
      graft_realigned(ctx.kv, cache, keys, base);
      st.wall.realign_ms = ms_since(t0);
      st.flops_realign = flops_realign_cost(spec, n);

      // full recompute band [l_start, l_det]: every segment row, causal
      // attention over fresh prefix KV + in-flight segment KV
      t0 = Clock::now();
      out.segment_hidden = cache.hidden_snapshot;
      out.hidden_depth.assign(n, l_start);
      for (std::size_t l = l_start; l <= l_det; ++l) {
        run_layer_rows(w, l, out.segment_hidden, positions, ctx.kv);
        mark_layer(marks, l, CellOrigin::kRecomputed);
      }
      for (auto& d : out.hidden_depth) d = l_det + 1;
      st.wall.recompute_ms = ms_since(t0);

      // one-shot token selection at the detection layer
      t0 = Clock::now();
      out.s_dev.resize(n);
      out.s_key_dev.resize(n);
      for (std::size_t j = 0; j < n; ++j) {
        out.s_dev[j] = mean_head_cosine_deviation(ctx.kv.value_row(l_det, base + j),
                                                  cache.v[l_det].row(j), spec.num_kv_heads);
        out.s_key_dev[j] = mean_head_cosine_deviation(ctx.kv.key_row(l_det, base + j),
                                                      keys.k[l_det].row(j), spec.num_kv_heads);
      }
      std::vector<double> influence(cache.influence.begin(), cache.influence.end());
      out.selection = final_selection(select_deviation(out.s_dev, opts.thresholds.tau_dev),
                                      select_influence(influence, opts.thresholds.tau_inf),
                                      suffix_set(n, opts.thresholds.suffix_k));
      st.wall.selection_ms = ms_since(t0);
      st.flops_selection = flops_selection_overhead(spec, n);

      t0 = Clock::now();
      sparse_rectify(w, out.segment_hidden, out.hidden_depth, out.selection, base, l_det,
                     sparse_hi, ctx.kv, marks);
      st.wall.rectify_ms = ms_since(t0);

      st.flops_cost = flops_segment_schedule(spec, base, n, l_start, l_det, sparse_hi,
                                             out.selection.size());
      break;
    }

    case RelayMode::kBlend: {
      if (!(opts.blend_alpha > 0.0 && opts.blend_alpha <= 1.0)) {
        throw std::invalid_argument("relay_extend: blend alpha must be in (0, 1]");
      }
      auto t0 = Clock::now();
      const RealignedKeys keys = realign(cache, base);
      ctx.kv.resize(base + n);
      graft_realigned(ctx.kv, cache, keys, base);
      st.wall.realign_ms = ms_since(t0);
      st.flops_realign = flops_realign_cost(spec, n);

      // bootstrap layers 0..1 for every row, from embeddings
      t0 = Clock::now();
      out.segment_hidden = embed_tokens(w, cache.segment_tokens);
      out.hidden_depth.assign(n, 0);
      const std::size_t boot_hi = 1;
      for (std::size_t l = 0; l <= boot_hi; ++l) {
        run_layer_rows(w, l, out.segment_hidden, positions, ctx.kv);
        mark_layer(marks, l, CellOrigin::kRecomputed);
      }
      for (auto& d : out.hidden_depth) d = boot_hi + 1;
      st.wall.recompute_ms = ms_since(t0);

      // rank rows by value-difference norm at the second layer
      t0 = Clock::now();
      std::vector<double> dev(n, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        const auto fresh = ctx.kv.value_row(boot_hi, base + j);
        const auto stale = cache.v[boot_hi].row(j);
        double acc = 0.0;
        for (std::size_t d = 0; d < fresh.size(); ++d) {
          const double diff = static_cast<double>(fresh[d]) - static_cast<double>(stale[d]);
          acc += diff * diff;
        }
        dev[j] = std::sqrt(acc);
      }
      const auto count = static_cast<std::size_t>(opts.blend_alpha * static_cast<double>(n));
      out.selection = top_k_by_score(dev, count, kSelBlendTopK);
      st.wall.selection_ms = ms_since(t0);
      st.flops_selection = flops_selection_overhead(spec, n);

      t0 = Clock::now();
      sparse_rectify(w, out.segment_hidden, out.hidden_depth, out.selection, base, boot_hi,
                     layers - 1, ctx.kv, marks);
      st.wall.rectify_ms = ms_since(t0);

      st.flops_cost =
          flops_segment_schedule(spec, base, n, 0, boot_hi, layers - 1, out.selection.size());
      break;
    }
  }

  st.recomputed_entries = marks.recomputed();
  st.reuse_rate = st.total_entries == 0
                      ? 0.0
                      : 1.0 - static_cast<double>(st.recomputed_entries) /
                                  static_cast<double>(st.total_entries);
  st.selected_count = out.selection.size();
  st.selected_deviation = out.selection.count_tag(kSelDeviation);
  st.selected_influence_score = out.selection.count_tag(kSelInfluenceScore);
  st.selected_influence_suffix = out.selection.count_tag(kSelInfluenceSuffix);
  st.selected_blend = out.selection.count_tag(kSelBlendTopK);
  st.wall.total_ms = ms_since(t_total);
  st.check_identity();
  ctx.segments.push_back(std::move(marks));
  return out;
}

RelayPrefillResult relay_prefill(const Weights& w, std::span<const TokenId> prefix,
                                 const RelayCache& cache, const LayerProfile& profile,
                                 const RelayOptions& opts) {
  const ModelSpec& spec = w.spec;
  RelayPrefillResult res;
  res.ctx.kv = KVContext(spec);

  const auto t0 = Clock::now();
  if (!prefix.empty()) prefill(w, prefix, res.ctx.kv, 0);
  const double prefix_ms = ms_since(t0);

  res.segment = relay_extend(w, res.ctx, cache, profile, opts);
  res.segment.stats.wall.fresh_ms = prefix_ms;
  res.segment.stats.wall.total_ms += prefix_ms;
  res.segment.stats.flops_cost += flops_span_full(spec, 0, prefix.size());
  res.segment.stats.flops_full_equiv += flops_span_full(spec, 0, prefix.size());

  // next-token logits at the segment end: propagate the last row to the top
  // as a pure query from its deepest computed hidden state
  const std::size_t n = cache.segment_len();
  const std::size_t depth = res.segment.hidden_depth[n - 1];
  const std::size_t last_pos = prefix.size() + n - 1;
  if (depth >= spec.num_layers) {
    Tensor last({1, spec.d_model});
    std::memcpy(last.row(0).data(), res.segment.segment_hidden.row(n - 1).data(),
                spec.d_model * sizeof(float));
    res.segment_end_logits = output_logits(w, last);
  } else {
    res.segment_end_logits = row_logits_from_layer(
        w, res.segment.segment_hidden.row(n - 1), depth, res.ctx.kv, last_pos);
  }
  return res;
}

RelayPrefillResult blend_baseline(const Weights& w, std::span<const TokenId> prefix,
                                  const RelayCache& cache, double alpha) {
  RelayOptions opts;
  opts.mode = RelayMode::kBlend;
  opts.blend_alpha = alpha;
  return relay_prefill(w, prefix, cache, LayerProfile{}, opts);
}

}  // namespace relaykv
