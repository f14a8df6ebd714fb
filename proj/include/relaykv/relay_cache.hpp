// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "relaykv/model.hpp"

namespace relaykv {

// Decode-time capture for one generated segment: pre-rotation keys and
// values per layer, the residual-stream snapshot at the configured start
// layer, and per-position influence scores (attention mass received from
// strictly later decode steps, summed over layers and heads).
//
// Keys are stored before rotation so the segment can be re-aligned to any
// new absolute base position; values carry no positional rotation and are
// stored as produced.
struct RelayCache {
  // geometry, kept so a cache file is self-describing
  std::size_t num_kv_heads = 0;
  std::size_t d_head = 0;
  std::size_t d_model = 0;
  float theta_base = 10000.0f;
  std::size_t max_positions = 0;

  std::vector<TokenId> segment_tokens;
  std::size_t source_base_position = 0;
  std::size_t snapshot_layer = 0;  // layer whose *input* hidden_snapshot holds
  std::vector<Tensor> k_pre;       // [L] segment_len x kv_dim
  std::vector<Tensor> v;           // [L] segment_len x kv_dim
  Tensor hidden_snapshot;          // segment_len x d_model
  std::vector<float> influence;    // segment_len, >= 0
  std::size_t decode_steps_observed = 0;

  std::size_t segment_len() const { return segment_tokens.size(); }
  std::size_t num_layers() const { return k_pre.size(); }
  std::size_t kv_dim() const { return num_kv_heads * d_head; }

  void validate() const;                        // internal consistency
  void validate_for(const ModelSpec& spec) const;  // geometry match
};

// Streaming recorder: feed one decode-step trace at a time; attention rows
// are folded into the influence sums immediately, so long generations never
// hold per-step attention in memory.
class RelayRecorder {
 public:
  RelayRecorder(const ModelSpec& spec, std::size_t source_base_position,
                std::size_t snapshot_layer, bool include_self = false);

  // `position` must be source_base_position + steps_seen.
  void feed(const StepTrace& trace, TokenId token, std::size_t position);
  RelayCache finalize();

 private:
  ModelSpec spec_;
  RelayCache cache_;
  std::vector<double> influence_acc_;
  bool include_self_ = false;
};

// Batch form over stored traces; identical sums to the streaming recorder.
// Traces must cover every decode step that produced the segment, with
// pre-rotation keys, values, hidden states and attention rows captured;
// a missing capture field is rejected by name.
RelayCache record_from_decode(const ModelSpec& spec, std::span<const StepTrace> traces,
                              std::span<const TokenId> segment_tokens,
                              std::size_t source_base_position, std::size_t snapshot_layer,
                              bool include_self = false);

// Rotation-applied view of the cache keys at a new base position. The
// stored pre-rotation keys are never touched, so realign is repeatable.
struct RealignedKeys {
  std::size_t base_position = 0;
  std::vector<Tensor> k;  // [L] segment_len x kv_dim
};
RealignedKeys realign(const RelayCache& cache, std::size_t new_base_position);

// Lossless byte round-trip (same manifest+blob scheme as the weight file).
std::vector<std::uint8_t> export_relay_cache(const RelayCache& cache);
RelayCache import_relay_cache(std::vector<std::uint8_t> bytes);
void save_relay_cache(const RelayCache& cache, const std::filesystem::path& path);
RelayCache load_relay_cache(const std::filesystem::path& path);

}  // namespace relaykv
