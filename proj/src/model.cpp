// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/model.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "relaykv/errors.hpp"

namespace relaykv {

// ---------------------------------------------------------------------------
// spec
// ---------------------------------------------------------------------------

void ModelSpec::validate() const {
  std::ostringstream err;
  if (num_layers < 6) err << "num_layers must be >= 6 (profiling needs a usable curve); ";
  if (d_model == 0 || num_heads == 0 || num_kv_heads == 0 || d_head == 0 || d_ff == 0 ||
      vocab_size == 0 || max_positions == 0) {
    err << "all extents must be >= 1; ";
  } else {
    if (num_heads % num_kv_heads != 0) err << "num_heads must be divisible by num_kv_heads; ";
    if (d_model != num_heads * d_head) err << "d_model must equal num_heads * d_head; ";
    if (d_head % 2 != 0) err << "d_head must be even for rotary embedding; ";
  }
  if (!(theta_base > 0.0f)) err << "theta_base must be positive; ";
  if (!(norm_eps > 0.0f)) err << "norm_eps must be positive; ";
  const std::string msg = err.str();
  if (!msg.empty()) throw SchemaError("invalid model spec: " + msg);
}

std::string ModelSpec::summary_id(std::uint64_t seed) const {
  std::ostringstream os;
  os << "toy-L" << num_layers << "-d" << d_model << "-h" << num_heads << "-kv" << num_kv_heads
     << "-ff" << d_ff << "-v" << vocab_size << "-s" << seed;
  return os.str();
}

// ---------------------------------------------------------------------------
// init
// ---------------------------------------------------------------------------

namespace {

struct SplitMix64 {
  std::uint64_t state;
  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
  // uniform in [-1, 1)
  float symmetric() {
    const float u = static_cast<float>(next() >> 40) * 0x1p-24f;
    return 2.0f * u - 1.0f;
  }
};

constexpr float kSqrt3 = 1.7320508f;

Tensor uniform_tensor(SplitMix64& rng, std::vector<std::size_t> shape, float std_dev) {
  Tensor t(std::move(shape));
  const float scale = std_dev * kSqrt3;  // U(-1,1) has std 1/sqrt(3)
  for (float& v : t.data) v = rng.symmetric() * scale;
  return t;
}

Tensor ones_tensor(std::vector<std::size_t> shape) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = 1.0f;
  return t;
}

}  // namespace

Weights init_weights(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  SplitMix64 rng{seed ^ 0x72656c6179ull};

  Weights w;
  w.spec = spec;
  w.model_id = spec.summary_id(seed);
  w.embedding = uniform_tensor(rng, {spec.vocab_size, spec.d_model}, 0.02f);

  const float d_in = 1.0f / std::sqrt(static_cast<float>(spec.d_model));
  const float ff_in = 1.0f / std::sqrt(static_cast<float>(spec.d_ff));
  // The cross-token write path is damped with depth so the residual stream
  // stays dominated by per-token content, the regime the relay premise
  // needs: same-token caches stay aligned under prefix shifts while
  // different-token caches do not.
  const float q_in = 1.0f / std::sqrt(static_cast<float>(spec.q_dim())) /
                     (2.0f * static_cast<float>(spec.num_layers));

  w.layers.resize(spec.num_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm_gain = ones_tensor({spec.d_model});
    layer.w_q = uniform_tensor(rng, {spec.d_model, spec.q_dim()}, d_in);
    layer.w_k = uniform_tensor(rng, {spec.d_model, spec.kv_dim()}, d_in);
    layer.w_v = uniform_tensor(rng, {spec.d_model, spec.kv_dim()}, d_in);
    layer.w_o = uniform_tensor(rng, {spec.q_dim(), spec.d_model}, q_in);
    layer.mlp_norm_gain = ones_tensor({spec.d_model});
    layer.w_gate = uniform_tensor(rng, {spec.d_model, spec.d_ff}, d_in);
    layer.w_up = uniform_tensor(rng, {spec.d_model, spec.d_ff}, d_in);
    layer.w_down = uniform_tensor(rng, {spec.d_ff, spec.d_model}, ff_in);
  }
  w.final_norm_gain = ones_tensor({spec.d_model});
  w.output_head = uniform_tensor(rng, {spec.d_model, spec.vocab_size}, d_in);
  return w;
}

// ---------------------------------------------------------------------------
// KV context
// ---------------------------------------------------------------------------

KVContext::KVContext(std::size_t num_layers, std::size_t kv_dim)
    : num_layers_(num_layers), kv_dim_(kv_dim), k_(num_layers), v_(num_layers) {}

void KVContext::resize(std::size_t positions) {
  if (positions < size_) throw std::invalid_argument("KVContext::resize: cannot shrink");
  for (std::size_t l = 0; l < num_layers_; ++l) {
    k_[l].resize(positions * kv_dim_, 0.0f);
    v_[l].resize(positions * kv_dim_, 0.0f);
  }
  size_ = positions;
}

std::span<float> KVContext::key_row(std::size_t layer, std::size_t pos) {
  return {k_[layer].data() + pos * kv_dim_, kv_dim_};
}
std::span<const float> KVContext::key_row(std::size_t layer, std::size_t pos) const {
  return {k_[layer].data() + pos * kv_dim_, kv_dim_};
}
std::span<float> KVContext::value_row(std::size_t layer, std::size_t pos) {
  return {v_[layer].data() + pos * kv_dim_, kv_dim_};
}
std::span<const float> KVContext::value_row(std::size_t layer, std::size_t pos) const {
  return {v_[layer].data() + pos * kv_dim_, kv_dim_};
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

Tensor embed_tokens(const Weights& w, std::span<const TokenId> tokens) {
  Tensor h({tokens.size(), w.spec.d_model});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId id = tokens[i];
    if (id < 0 || static_cast<std::size_t>(id) >= w.spec.vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(id) + " outside vocab of " +
                                  std::to_string(w.spec.vocab_size));
    }
    std::memcpy(h.row(i).data(), w.embedding.row(static_cast<std::size_t>(id)).data(),
                w.spec.d_model * sizeof(float));
  }
  return h;
}

void rope_rotate_heads(std::span<float> row, std::size_t num_heads, std::size_t d_head,
                       std::int64_t position, float theta_base) {
  for (std::size_t h = 0; h < num_heads; ++h) {
    rope_rotate(row.subspan(h * d_head, d_head), position, theta_base);
  }
}

void attend_row(const ModelSpec& spec, std::span<const float> q, const KVContext& ctx,
                std::size_t layer, std::size_t position, std::span<const float> self_k,
                std::span<const float> self_v, std::span<float> out, Tensor* attn_capture) {
  const std::size_t ctx_len = position + 1;
  const std::size_t dh = spec.d_head;
  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  if (attn_capture) *attn_capture = Tensor({spec.num_heads, ctx_len});

  std::vector<float> scores(ctx_len);
  for (std::size_t h = 0; h < spec.num_heads; ++h) {
    const std::size_t kvh = h / spec.head_group();
    const float* qh = q.data() + h * dh;
    for (std::size_t j = 0; j < ctx_len; ++j) {
      const float* kj = (j == position && !self_k.empty())
                            ? self_k.data() + kvh * dh
                            : ctx.key_row(layer, j).data() + kvh * dh;
      float s = 0.0f;
      for (std::size_t d = 0; d < dh; ++d) s += qh[d] * kj[d];
      scores[j] = s * inv_sqrt_dh;
    }
    softmax_inplace(scores);
    if (attn_capture) {
      std::memcpy(attn_capture->row(h).data(), scores.data(), ctx_len * sizeof(float));
    }
    float* oh = out.data() + h * dh;
    std::memset(oh, 0, dh * sizeof(float));
    for (std::size_t j = 0; j < ctx_len; ++j) {
      const float a = scores[j];
      const float* vj = (j == position && !self_v.empty())
                            ? self_v.data() + kvh * dh
                            : ctx.value_row(layer, j).data() + kvh * dh;
      for (std::size_t d = 0; d < dh; ++d) oh[d] += a * vj[d];
    }
  }
}

namespace {

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }

// attn output projection + residual, then gated MLP + residual, row-wise.
void finish_rows(const Weights& w, std::size_t layer, Tensor& hidden, const Tensor& attn_out) {
  const auto& lw = w.layers[layer];
  const Tensor proj = matmul(attn_out, lw.w_o);
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    auto h = hidden.row(r);
    const auto p = proj.row(r);
    for (std::size_t d = 0; d < h.size(); ++d) h[d] += p[d];
  }

  Tensor normed({hidden.rows(), w.spec.d_model});
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    rms_norm(hidden.row(r), lw.mlp_norm_gain.data, w.spec.norm_eps, normed.row(r));
  }
  Tensor gate = matmul(normed, lw.w_gate);
  const Tensor up = matmul(normed, lw.w_up);
  for (std::size_t i = 0; i < gate.data.size(); ++i) gate.data[i] = silu(gate.data[i]) * up.data[i];
  const Tensor down = matmul(gate, lw.w_down);
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    auto h = hidden.row(r);
    const auto p = down.row(r);
    for (std::size_t d = 0; d < h.size(); ++d) h[d] += p[d];
  }
}

}  // namespace

void run_layer_rows(const Weights& w, std::size_t layer, Tensor& hidden,
                    std::span<const std::size_t> positions, KVContext& ctx,
                    const CaptureFlags* capture, StepTrace* trace) {
  const ModelSpec& spec = w.spec;
  const auto& lw = w.layers[layer];
  const std::size_t rows = hidden.rows();

  if (capture && trace && capture->hidden) trace->hidden[layer] = hidden;

  Tensor normed({rows, spec.d_model});
  for (std::size_t r = 0; r < rows; ++r) {
    rms_norm(hidden.row(r), lw.attn_norm_gain.data, spec.norm_eps, normed.row(r));
  }
  Tensor q = matmul(normed, lw.w_q);
  Tensor k = matmul(normed, lw.w_k);
  const Tensor v = matmul(normed, lw.w_v);

  if (capture && trace && capture->pre_rope_keys) {
    trace->k_pre[layer] = k;
    trace->v[layer] = v;
  }

  // rotate + commit all rows of this chunk, then attend: a row's K/V must be
  // visible to later rows of the same chunk.
  for (std::size_t r = 0; r < rows; ++r) {
    const auto pos = static_cast<std::int64_t>(positions[r]);
    rope_rotate_heads(q.row(r), spec.num_heads, spec.d_head, pos, spec.theta_base);
    rope_rotate_heads(k.row(r), spec.num_kv_heads, spec.d_head, pos, spec.theta_base);
    std::memcpy(ctx.key_row(layer, positions[r]).data(), k.row(r).data(),
                spec.kv_dim() * sizeof(float));
    std::memcpy(ctx.value_row(layer, positions[r]).data(), v.row(r).data(),
                spec.kv_dim() * sizeof(float));
  }

  Tensor attn_out({rows, spec.q_dim()});
  const bool cap_attn = capture && trace && capture->attention;
  if (cap_attn && trace->attn[layer].size() != rows) trace->attn[layer].resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    attend_row(spec, q.row(r), ctx, layer, positions[r], {}, {}, attn_out.row(r),
               cap_attn ? &trace->attn[layer][r] : nullptr);
  }

  finish_rows(w, layer, hidden, attn_out);
}

Tensor output_logits(const Weights& w, const Tensor& hidden_rows) {
  Tensor normed({hidden_rows.rows(), w.spec.d_model});
  for (std::size_t r = 0; r < hidden_rows.rows(); ++r) {
    rms_norm(hidden_rows.row(r), w.final_norm_gain.data, w.spec.norm_eps, normed.row(r));
  }
  return matmul(normed, w.output_head);
}

namespace {

StepTrace make_trace(const ModelSpec& spec, const CaptureFlags& capture) {
  StepTrace t;
  if (capture.hidden) t.hidden.resize(spec.num_layers);
  if (capture.pre_rope_keys) {
    t.k_pre.resize(spec.num_layers);
    t.v.resize(spec.num_layers);
  }
  if (capture.attention) t.attn.resize(spec.num_layers);
  return t;
}

}  // namespace

PrefillResult prefill(const Weights& w, std::span<const TokenId> tokens, KVContext& ctx,
                      std::size_t base_position, const CaptureFlags& capture) {
  const ModelSpec& spec = w.spec;
  if (tokens.empty()) throw std::invalid_argument("prefill: empty token chunk");
  if (base_position != ctx.size()) {
    throw std::invalid_argument("prefill: base_position " + std::to_string(base_position) +
                                " != context size " + std::to_string(ctx.size()));
  }
  if (base_position + tokens.size() > spec.max_positions) {
    throw std::invalid_argument("prefill: position overflow beyond max_positions " +
                                std::to_string(spec.max_positions));
  }

  Tensor hidden = embed_tokens(w, tokens);
  ctx.resize(base_position + tokens.size());
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = base_position + i;

  PrefillResult res;
  res.trace = make_trace(spec, capture);
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    run_layer_rows(w, l, hidden, positions, ctx, &capture, &res.trace);
  }
  res.logits = output_logits(w, hidden);
  res.trace.logits = res.logits;
  return res;
}

PrefillResult decode_step(const Weights& w, TokenId token, KVContext& ctx, std::size_t position,
                          const CaptureFlags& capture) {
  const TokenId one[1] = {token};
  return prefill(w, one, ctx, position, capture);
}

Tensor row_logits_from_layer(const Weights& w, std::span<const float> hidden_row,
                             std::size_t first_layer, const KVContext& ctx,
                             std::size_t position) {
  const ModelSpec& spec = w.spec;
  Tensor hidden({1, spec.d_model});
  std::memcpy(hidden.row(0).data(), hidden_row.data(), spec.d_model * sizeof(float));

  for (std::size_t l = first_layer; l < spec.num_layers; ++l) {
    const auto& lw = w.layers[l];
    Tensor normed({1, spec.d_model});
    rms_norm(hidden.row(0), lw.attn_norm_gain.data, spec.norm_eps, normed.row(0));
    Tensor q = matmul(normed, lw.w_q);
    Tensor k = matmul(normed, lw.w_k);
    const Tensor v = matmul(normed, lw.w_v);
    const auto pos = static_cast<std::int64_t>(position);
    rope_rotate_heads(q.row(0), spec.num_heads, spec.d_head, pos, spec.theta_base);
    rope_rotate_heads(k.row(0), spec.num_kv_heads, spec.d_head, pos, spec.theta_base);

    Tensor attn_out({1, spec.q_dim()});
    attend_row(spec, q.row(0), ctx, l, position, k.row(0), v.row(0), attn_out.row(0));
    finish_rows(w, l, hidden, attn_out);
  }
  return output_logits(w, hidden);
}

std::size_t argmax(std::span<const float> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

GenerateResult greedy_generate(const Weights& w, KVContext& ctx,
                               std::span<const float> prompt_end_logits,
                               std::size_t max_new_tokens, const CaptureFlags& capture,
                               const StepHook& hook) {
  GenerateResult out;
  if (max_new_tokens == 0) return out;
  TokenId next = static_cast<TokenId>(argmax(prompt_end_logits));
  for (std::size_t t = 0; t < max_new_tokens; ++t) {
    const std::size_t pos = ctx.size();
    const PrefillResult step = decode_step(w, next, ctx, pos, capture);
    out.tokens.push_back(next);
    if (hook) hook(step.trace, next, pos);
    if (t + 1 < max_new_tokens) {
      next = static_cast<TokenId>(argmax(step.logits.row(0)));
    }
  }
  return out;
}

}  // namespace relaykv
