// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "relaykv/tensor.hpp"

namespace relaykv {

using TokenId = std::int32_t;

// Decoder-only architecture description. Pre-norm residual blocks with RMS
// normalization, rotary attention (optionally grouped KV heads) and a gated
// MLP. Greedy decoding only; the whole forward path is deterministic.
struct ModelSpec {
  std::size_t num_layers = 0;
  std::size_t d_model = 0;
  std::size_t num_heads = 0;
  std::size_t num_kv_heads = 0;
  std::size_t d_head = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  float theta_base = 10000.0f;
  std::size_t max_positions = 0;
  float norm_eps = 1e-5f;

  std::size_t q_dim() const { return num_heads * d_head; }
  std::size_t kv_dim() const { return num_kv_heads * d_head; }
  std::size_t head_group() const { return num_heads / num_kv_heads; }

  void validate() const;  // throws SchemaError on violation
  std::string summary_id(std::uint64_t seed) const;
};

struct LayerWeights {
  Tensor attn_norm_gain;  // [d_model]
  Tensor w_q;             // [d_model x q_dim]
  Tensor w_k, w_v;        // [d_model x kv_dim]
  Tensor w_o;             // [q_dim x d_model]
  Tensor mlp_norm_gain;   // [d_model]
  Tensor w_gate, w_up;    // [d_model x d_ff]
  Tensor w_down;          // [d_ff x d_model]
};

struct Weights {
  ModelSpec spec;
  std::string model_id;
  Tensor embedding;  // [vocab x d_model]
  std::vector<LayerWeights> layers;
  Tensor final_norm_gain;  // [d_model]
  Tensor output_head;      // [d_model x vocab]
};

// Reproducible pseudo-random init: same (spec, seed) gives bit-identical
// weights. Linear layers uniform with std 1/sqrt(fan_in), embeddings with
// std 0.02, norm gains 1.
Weights init_weights(const ModelSpec& spec, std::uint64_t seed);

// Per-layer KV store: one flat row of kv_dim floats per position, keys
// post-rotation. Single writer; value-semantic copies are cheap enough at
// toy scale and used freely by the oracle paths.
class KVContext {
 public:
  KVContext() = default;
  KVContext(std::size_t num_layers, std::size_t kv_dim);
  explicit KVContext(const ModelSpec& spec) : KVContext(spec.num_layers, spec.kv_dim()) {}

  std::size_t size() const { return size_; }
  std::size_t num_layers() const { return num_layers_; }
  std::size_t kv_dim() const { return kv_dim_; }

  void resize(std::size_t positions);  // grows zero-filled, never shrinks
  std::span<float> key_row(std::size_t layer, std::size_t pos);
  std::span<const float> key_row(std::size_t layer, std::size_t pos) const;
  std::span<float> value_row(std::size_t layer, std::size_t pos);
  std::span<const float> value_row(std::size_t layer, std::size_t pos) const;

 private:
  std::size_t num_layers_ = 0, kv_dim_ = 0, size_ = 0;
  std::vector<std::vector<float>> k_, v_;
};

// Opt-in, chunk-scoped capture. Attention capture is memory-hungry
// (one row per context position per head per layer); callers that only
// accumulate statistics should consume traces step by step.
struct CaptureFlags {
  bool hidden = false;         // residual-stream input to every layer
  bool pre_rope_keys = false;  // K before rotation, plus V as produced
  bool attention = false;      // per-head attention rows
};

struct StepTrace {
  // Indexed by layer; tensors hold chunk rows. Empty when not captured.
  std::vector<Tensor> hidden;  // [L] chunk x d_model
  std::vector<Tensor> k_pre;   // [L] chunk x kv_dim
  std::vector<Tensor> v;       // [L] chunk x kv_dim
  // attn[layer][chunk_row] is H x (ctx_len_at_row).
  std::vector<std::vector<Tensor>> attn;
  Tensor logits;  // chunk x vocab
};

struct PrefillResult {
  Tensor logits;  // chunk x vocab
  StepTrace trace;
};

// Causal forward over past + chunk. base_position must equal ctx.size().
// Chunked prefill, single-call prefill and token-by-token decode produce
// bit-identical results.
PrefillResult prefill(const Weights& w, std::span<const TokenId> tokens, KVContext& ctx,
                      std::size_t base_position, const CaptureFlags& capture = {});
PrefillResult decode_step(const Weights& w, TokenId token, KVContext& ctx,
                          std::size_t position, const CaptureFlags& capture = {});

// --- building blocks shared with the relay engine ---

Tensor embed_tokens(const Weights& w, std::span<const TokenId> tokens);

// Applies per-head rotation to a row of num_heads * d_head floats.
void rope_rotate_heads(std::span<float> row, std::size_t num_heads, std::size_t d_head,
                       std::int64_t position, float theta_base);

// One transformer layer over an arbitrary ascending subset of rows.
// K/V for all rows are committed into ctx before any attention runs; each
// row then attends causally over ctx[0..pos]. hidden is updated in place.
void run_layer_rows(const Weights& w, std::size_t layer, Tensor& hidden,
                    std::span<const std::size_t> positions, KVContext& ctx,
                    const CaptureFlags* capture = nullptr, StepTrace* trace = nullptr);

// Attention for a single rotated query row over ctx[0..position] of one
// layer. self_k/self_v, when non-empty, stand in for the context cell at
// `position` (used for query-only passes that must not touch the cache).
void attend_row(const ModelSpec& spec, std::span<const float> q, const KVContext& ctx,
                std::size_t layer, std::size_t position, std::span<const float> self_k,
                std::span<const float> self_v, std::span<float> out,
                Tensor* attn_capture = nullptr);

// Final RMS norm + output head for a batch of hidden rows.
Tensor output_logits(const Weights& w, const Tensor& hidden_rows);

// Runs layers [first_layer, L) for one row as a pure query: fresh Q/K/V are
// computed but never committed; the row's own context cell is overridden
// with the fresh K/V. Returns the row's logits.
Tensor row_logits_from_layer(const Weights& w, std::span<const float> hidden_row,
                             std::size_t first_layer, const KVContext& ctx,
                             std::size_t position);

// --- greedy generation ---

struct GenerateResult {
  std::vector<TokenId> tokens;
};

// Called once per decode step with the step trace, the token that was fed,
// and its absolute position. The trace is only alive during the call.
using StepHook = std::function<void(const StepTrace&, TokenId, std::size_t)>;

// Greedy continuation from the logits of the last prompt position. Runs
// exactly max_new_tokens decode steps, so every generated token (including
// the last) has its KV in ctx and its trace observed by the hook.
GenerateResult greedy_generate(const Weights& w, KVContext& ctx,
                               std::span<const float> prompt_end_logits,
                               std::size_t max_new_tokens, const CaptureFlags& capture = {},
                               const StepHook& hook = {});

std::size_t argmax(std::span<const float> values);

}  // namespace relaykv
