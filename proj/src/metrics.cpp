// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "relaykv/errors.hpp"

namespace relaykv {

namespace {

// Double-precision cosine over float spans. Bit-identical inputs return
// exactly 1 so bit-equal caches produce exact zero deviation.
double cosine_d(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (std::sqrt(na) < 1e-12 || std::sqrt(nb) < 1e-12) return 0.0;
  if (std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0) return 1.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double norm_d(std::span<const float> a) {
  double n = 0.0;
  for (float x : a) n += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(n);
}

// Symmetric bounded ratio min/max in (0, 1]; both-zero vectors count as
// identical (ratio 1).
double norm_ratio_d(std::span<const float> a, std::span<const float> b) {
  const double na = norm_d(a), nb = norm_d(b);
  const double hi = std::max(na, nb);
  if (hi < 1e-12) return 1.0;
  return std::min(na, nb) / hi;
}

std::vector<double> average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double DeviationMatrix::at(MetricKind kind, std::size_t pos, std::size_t layer) const {
  const std::size_t idx = pos * num_layers + layer;
  switch (kind) {
    case MetricKind::kValueCos: return value_cos[idx];
    case MetricKind::kKeyCos: return key_cos[idx];
    case MetricKind::kValueNorm: return value_norm[idx];
    case MetricKind::kKeyNorm: return key_norm[idx];
  }
  return 0.0;
}

std::vector<double> DeviationMatrix::layer_column(MetricKind kind, std::size_t layer) const {
  std::vector<double> col(segment_len);
  for (std::size_t j = 0; j < segment_len; ++j) col[j] = at(kind, j, layer);
  return col;
}

std::vector<double> DeviationMatrix::position_row(MetricKind kind, std::size_t pos) const {
  std::vector<double> row(num_layers);
  for (std::size_t l = 0; l < num_layers; ++l) row[l] = at(kind, pos, l);
  return row;
}

double mean_head_cosine_deviation(std::span<const float> a, std::span<const float> b,
                                  std::size_t heads) {
  if (a.size() != b.size() || heads == 0 || a.size() % heads != 0) {
    throw std::invalid_argument("mean_head_cosine_deviation: bad row layout");
  }
  const std::size_t dh = a.size() / heads;
  double acc = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    acc += cosine_d(a.subspan(h * dh, dh), b.subspan(h * dh, dh));
  }
  return 1.0 - acc / static_cast<double>(heads);
}

double mean_head_norm_ratio_deviation(std::span<const float> a, std::span<const float> b,
                                      std::size_t heads) {
  if (a.size() != b.size() || heads == 0 || a.size() % heads != 0) {
    throw std::invalid_argument("mean_head_norm_ratio_deviation: bad row layout");
  }
  const std::size_t dh = a.size() / heads;
  double acc = 0.0;
  for (std::size_t h = 0; h < heads; ++h) {
    acc += norm_ratio_d(a.subspan(h * dh, dh), b.subspan(h * dh, dh));
  }
  return 1.0 - acc / static_cast<double>(heads);
}

DeviationMatrix token_deviation(const SegmentKV& reuse, const SegmentKV& full,
                                std::size_t num_kv_heads) {
  if (reuse.v.size() != full.v.size() || reuse.k_pre.size() != full.k_pre.size() ||
      reuse.v.empty()) {
    throw std::invalid_argument("token_deviation: layer count mismatch");
  }
  const std::size_t layers = reuse.v.size();
  const std::size_t n = reuse.v[0].rows();
  const std::size_t kv_dim = reuse.v[0].cols();
  if (kv_dim % num_kv_heads != 0) {
    throw std::invalid_argument("token_deviation: kv width not divisible by head count");
  }

  DeviationMatrix m;
  m.segment_len = n;
  m.num_layers = layers;
  m.value_cos.resize(n * layers);
  m.key_cos.resize(n * layers);
  m.value_norm.resize(n * layers);
  m.key_norm.resize(n * layers);

  for (std::size_t l = 0; l < layers; ++l) {
    const Tensor& rv = reuse.v[l];
    const Tensor& fv = full.v[l];
    const Tensor& rk = reuse.k_pre[l];
    const Tensor& fk = full.k_pre[l];
    if (rv.rows() != n || fv.rows() != n || rv.cols() != kv_dim || fv.cols() != kv_dim ||
        rk.rows() != n || fk.rows() != n) {
      throw std::invalid_argument("token_deviation: shape mismatch at layer " +
                                  std::to_string(l));
    }
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t idx = j * layers + l;
      m.value_cos[idx] = mean_head_cosine_deviation(rv.row(j), fv.row(j), num_kv_heads);
      m.key_cos[idx] = mean_head_cosine_deviation(rk.row(j), fk.row(j), num_kv_heads);
      m.value_norm[idx] = mean_head_norm_ratio_deviation(rv.row(j), fv.row(j), num_kv_heads);
      m.key_norm[idx] = mean_head_norm_ratio_deviation(rk.row(j), fk.row(j), num_kv_heads);
    }
  }
  return m;
}

std::vector<double> layer_similarity(const DeviationMatrix& dev, MetricKind kind) {
  if (dev.segment_len == 0) throw std::invalid_argument("layer_similarity: empty segment");
  std::vector<double> s(dev.num_layers);
  for (std::size_t l = 0; l < dev.num_layers; ++l) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dev.segment_len; ++j) acc += 1.0 - dev.at(kind, j, l);
    s[l] = acc / static_cast<double>(dev.segment_len);
  }
  return s;
}

SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("spearman: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("spearman: need at least 2 samples");

  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return {0.0, true};
  return {sxy / std::sqrt(sxx * syy), false};
}

LayerCurve make_layer_curve(const DeviationMatrix& dev) {
  LayerCurve c;
  c.s = layer_similarity(dev, MetricKind::kValueCos);
  c.rho.assign(dev.num_layers, std::numeric_limits<double>::quiet_NaN());
  c.rho_degenerate.assign(dev.num_layers, true);
  for (std::size_t l = 1; l < dev.num_layers; ++l) {
    if (dev.segment_len < 2) {
      c.rho[l] = 0.0;
      continue;
    }
    const auto prev = dev.layer_column(MetricKind::kValueCos, l - 1);
    const auto cur = dev.layer_column(MetricKind::kValueCos, l);
    const SpearmanResult r = spearman(prev, cur);
    c.rho[l] = r.rho;
    c.rho_degenerate[l] = r.degenerate;
  }
  return c;
}

LayerCurve average_curves(std::span<const LayerCurve> curves) {
  if (curves.empty()) throw std::invalid_argument("average_curves: no curves");
  const std::size_t layers = curves[0].s.size();
  LayerCurve avg;
  avg.s.assign(layers, 0.0);
  avg.rho.assign(layers, std::numeric_limits<double>::quiet_NaN());
  avg.rho_degenerate.assign(layers, true);
  for (const LayerCurve& c : curves) {
    if (c.s.size() != layers) throw std::invalid_argument("average_curves: layer mismatch");
    for (std::size_t l = 0; l < layers; ++l) avg.s[l] += c.s[l];
  }
  for (std::size_t l = 0; l < layers; ++l) avg.s[l] /= static_cast<double>(curves.size());
  for (std::size_t l = 1; l < layers; ++l) {
    double acc = 0.0;
    bool all_degenerate = true;
    for (const LayerCurve& c : curves) {
      acc += c.rho_degenerate[l] ? 0.0 : c.rho[l];
      all_degenerate = all_degenerate && c.rho_degenerate[l];
    }
    avg.rho[l] = acc / static_cast<double>(curves.size());
    avg.rho_degenerate[l] = all_degenerate;
  }
  return avg;
}

// ---------------------------------------------------------------------------
// synthetic workloads
// ---------------------------------------------------------------------------

namespace {

std::uint64_t splitmix_next(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

std::vector<TokenId> synthetic_tokens(std::uint64_t seed, std::uint64_t salt, std::size_t count,
                                      std::size_t vocab_size) {
  std::uint64_t state = seed ^ (salt * 0x9e3779b97f4a7c15ull + 0x1234567ull);
  std::vector<TokenId> out(count);
  for (auto& t : out) {
    t = static_cast<TokenId>(splitmix_next(state) % vocab_size);
  }
  return out;
}

std::size_t pick_length(std::uint64_t seed, std::uint64_t salt, std::size_t lo, std::size_t hi) {
  if (hi <= lo) return lo;
  std::uint64_t state = seed ^ (salt * 0xd1b54a32d192ed03ull + 0xabcdull);
  return lo + static_cast<std::size_t>(splitmix_next(state) % (hi - lo + 1));
}

void TwoStageConfig::validate() const {
  if (instances == 0) throw SchemaError("two-stage config: instances must be >= 1");
  if (segment_len == 0) throw SchemaError("two-stage config: segment_len must be >= 1");
  if (stage1_prefix_min == 0 || stage1_prefix_min > stage1_prefix_max ||
      stage2_prefix_min == 0 || stage2_prefix_min > stage2_prefix_max) {
    throw SchemaError("two-stage config: bad prefix length range");
  }
}

TwoStageInstance make_two_stage_instance(const Weights& w, const TwoStageConfig& cfg,
                                         std::size_t index) {
  cfg.validate();
  const ModelSpec& spec = w.spec;
  TwoStageInstance inst;
  inst.instance_seed = cfg.seed + 0x9e37u * (index + 1);

  const std::size_t p1 =
      pick_length(inst.instance_seed, 11, cfg.stage1_prefix_min, cfg.stage1_prefix_max);
  inst.stage1_prefix = synthetic_tokens(inst.instance_seed, 21, p1, spec.vocab_size);
  if (cfg.identical_prefix) {
    inst.stage2_prefix = inst.stage1_prefix;
  } else {
    const std::size_t p2 =
        pick_length(inst.instance_seed, 12, cfg.stage2_prefix_min, cfg.stage2_prefix_max);
    inst.stage2_prefix = synthetic_tokens(inst.instance_seed, 22, p2, spec.vocab_size);
  }
  inst.stage2_suffix =
      synthetic_tokens(inst.instance_seed, 23, cfg.stage2_suffix_len, spec.vocab_size);

  // stage 1: prefill the prompt, then greedy-decode the segment with capture
  KVContext ctx(spec);
  const PrefillResult prompt = prefill(w, inst.stage1_prefix, ctx, 0);
  CaptureFlags capture;
  capture.hidden = true;
  capture.pre_rope_keys = true;
  capture.attention = true;
  RelayRecorder recorder(spec, inst.stage1_prefix.size(), cfg.snapshot_layer);
  const StepHook hook = [&](const StepTrace& tr, TokenId tok, std::size_t pos) {
    recorder.feed(tr, tok, pos);
  };
  const GenerateResult gen =
      greedy_generate(w, ctx, prompt.logits.row(inst.stage1_prefix.size() - 1), cfg.segment_len,
                      capture, hook);
  inst.segment = gen.tokens;
  inst.cache = recorder.finalize();
  return inst;
}

SegmentKV segment_kv_from_trace(const StepTrace& trace, std::size_t base, std::size_t len) {
  SegmentKV kv;
  kv.k_pre.reserve(trace.k_pre.size());
  kv.v.reserve(trace.v.size());
  for (std::size_t l = 0; l < trace.k_pre.size(); ++l) {
    const std::size_t width = trace.k_pre[l].cols();
    Tensor k({len, width}), v({len, width});
    for (std::size_t j = 0; j < len; ++j) {
      std::memcpy(k.row(j).data(), trace.k_pre[l].row(base + j).data(), width * sizeof(float));
      std::memcpy(v.row(j).data(), trace.v[l].row(base + j).data(), width * sizeof(float));
    }
    kv.k_pre.push_back(std::move(k));
    kv.v.push_back(std::move(v));
  }
  return kv;
}

ComparisonPair build_comparison_setting(const Weights& w, const TwoStageInstance& inst,
                                        ComparisonSetting setting) {
  const ModelSpec& spec = w.spec;
  const std::size_t n = inst.segment.size();
  CaptureFlags capture;
  capture.pre_rope_keys = true;

  // reference side: full prefill of (stage-2 prefix + segment)
  std::vector<TokenId> reference_tokens = inst.stage2_prefix;
  reference_tokens.insert(reference_tokens.end(), inst.segment.begin(), inst.segment.end());
  KVContext ref_ctx(spec);
  const PrefillResult ref = prefill(w, reference_tokens, ref_ctx, 0, capture);

  ComparisonPair pair;
  pair.full = segment_kv_from_trace(ref.trace, inst.stage2_prefix.size(), n);

  switch (setting) {
    case ComparisonSetting::kDecoding: {
      pair.reuse.k_pre = inst.cache.k_pre;
      pair.reuse.v = inst.cache.v;
      break;
    }
    case ComparisonSetting::kRandom: {
      const auto random_segment =
          synthetic_tokens(inst.instance_seed, 31, n, spec.vocab_size);
      std::vector<TokenId> tokens = inst.stage2_prefix;
      tokens.insert(tokens.end(), random_segment.begin(), random_segment.end());
      KVContext ctx(spec);
      const PrefillResult r = prefill(w, tokens, ctx, 0, capture);
      pair.reuse = segment_kv_from_trace(r.trace, inst.stage2_prefix.size(), n);
      break;
    }
    case ComparisonSetting::kIndependent: {
      KVContext ctx(spec);
      const PrefillResult r = prefill(w, inst.segment, ctx, 0, capture);
      pair.reuse = segment_kv_from_trace(r.trace, 0, n);
      break;
    }
  }
  return pair;
}

}  // namespace relaykv
