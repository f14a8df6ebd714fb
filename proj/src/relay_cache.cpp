// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/relay_cache.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "relaykv/serialize.hpp"

namespace relaykv {

namespace {
constexpr const char* kCacheMagic = "RKRC";
}

void RelayCache::validate() const {
  const std::size_t n = segment_len();
  if (n == 0) throw std::invalid_argument("relay cache: empty segment");
  if (k_pre.size() != v.size() || k_pre.empty()) {
    throw std::invalid_argument("relay cache: per-layer K/V tables disagree");
  }
  if (snapshot_layer >= num_layers()) {
    throw std::invalid_argument("relay cache: snapshot layer out of range");
  }
  for (std::size_t l = 0; l < num_layers(); ++l) {
    if (k_pre[l].rows() != n || v[l].rows() != n || k_pre[l].cols() != kv_dim() ||
        v[l].cols() != kv_dim()) {
      throw std::invalid_argument("relay cache: layer " + std::to_string(l) +
                                  " tensor shape mismatch");
    }
  }
  if (hidden_snapshot.rows() != n || hidden_snapshot.cols() != d_model) {
    throw std::invalid_argument("relay cache: hidden snapshot shape mismatch");
  }
  if (influence.size() != n) throw std::invalid_argument("relay cache: influence length mismatch");
  for (float s : influence) {
    if (!(s >= 0.0f)) throw std::invalid_argument("relay cache: negative influence score");
  }
}

void RelayCache::validate_for(const ModelSpec& spec) const {
  validate();
  if (num_layers() != spec.num_layers || num_kv_heads != spec.num_kv_heads ||
      d_head != spec.d_head || d_model != spec.d_model || theta_base != spec.theta_base) {
    throw std::invalid_argument("relay cache geometry does not match model spec");
  }
}

RelayRecorder::RelayRecorder(const ModelSpec& spec, std::size_t source_base_position,
                             std::size_t snapshot_layer, bool include_self)
    : spec_(spec), include_self_(include_self) {
  if (snapshot_layer >= spec.num_layers) {
    throw std::invalid_argument("recorder: snapshot layer out of range");
  }
  cache_.num_kv_heads = spec.num_kv_heads;
  cache_.d_head = spec.d_head;
  cache_.d_model = spec.d_model;
  cache_.theta_base = spec.theta_base;
  cache_.max_positions = spec.max_positions;
  cache_.source_base_position = source_base_position;
  cache_.snapshot_layer = snapshot_layer;
  cache_.k_pre.assign(spec.num_layers, Tensor{});
  cache_.v.assign(spec.num_layers, Tensor{});
}

void RelayRecorder::feed(const StepTrace& trace, TokenId token, std::size_t position) {
  const std::size_t t = cache_.segment_tokens.size();
  if (position != cache_.source_base_position + t) {
    throw std::invalid_argument("recorder: step position out of sequence");
  }
  if (trace.k_pre.size() != spec_.num_layers || trace.v.size() != spec_.num_layers) {
    throw std::invalid_argument("recorder: capture missing field 'pre_rope_keys'");
  }
  if (trace.hidden.size() != spec_.num_layers) {
    throw std::invalid_argument("recorder: capture missing field 'hidden'");
  }
  if (trace.attn.size() != spec_.num_layers) {
    throw std::invalid_argument("recorder: capture missing field 'attention'");
  }

  // grow per-layer stores by one row
  if (t == 0) {
    for (std::size_t l = 0; l < spec_.num_layers; ++l) {
      cache_.k_pre[l] = Tensor({0, spec_.kv_dim()});
      cache_.v[l] = Tensor({0, spec_.kv_dim()});
    }
    cache_.hidden_snapshot = Tensor({0, spec_.d_model});
  }
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    if (trace.k_pre[l].rows() != 1 || trace.v[l].rows() != 1) {
      throw std::invalid_argument("recorder: expected single-row decode trace");
    }
    cache_.k_pre[l].shape[0] = t + 1;
    cache_.k_pre[l].data.insert(cache_.k_pre[l].data.end(), trace.k_pre[l].data.begin(),
                                trace.k_pre[l].data.end());
    cache_.v[l].shape[0] = t + 1;
    cache_.v[l].data.insert(cache_.v[l].data.end(), trace.v[l].data.begin(),
                            trace.v[l].data.end());
  }
  const Tensor& snap = trace.hidden[cache_.snapshot_layer];
  cache_.hidden_snapshot.shape[0] = t + 1;
  cache_.hidden_snapshot.data.insert(cache_.hidden_snapshot.data.end(), snap.data.begin(),
                                     snap.data.end());

  // influence received by earlier segment positions from this step's query.
  // Attention rows span the whole causal context; only cells that fall
  // inside the segment accumulate.
  influence_acc_.resize(t + 1, 0.0);
  const std::size_t upto = include_self_ ? t + 1 : t;
  for (std::size_t l = 0; l < spec_.num_layers; ++l) {
    if (trace.attn[l].size() != 1) {
      throw std::invalid_argument("recorder: capture missing field 'attention'");
    }
    const Tensor& rows = trace.attn[l][0];  // H x (position+1)
    for (std::size_t h = 0; h < spec_.num_heads; ++h) {
      const auto row = rows.row(h);
      for (std::size_t j = 0; j < upto; ++j) {
        influence_acc_[j] += static_cast<double>(row[cache_.source_base_position + j]);
      }
    }
  }

  cache_.segment_tokens.push_back(token);
  cache_.decode_steps_observed = t + 1;
}

RelayCache RelayRecorder::finalize() {
  cache_.influence.resize(cache_.segment_tokens.size());
  for (std::size_t j = 0; j < cache_.influence.size(); ++j) {
    cache_.influence[j] = static_cast<float>(influence_acc_[j]);
  }
  cache_.validate();
  return std::move(cache_);
}

RelayCache record_from_decode(const ModelSpec& spec, std::span<const StepTrace> traces,
                              std::span<const TokenId> segment_tokens,
                              std::size_t source_base_position, std::size_t snapshot_layer,
                              bool include_self) {
  if (traces.size() != segment_tokens.size()) {
    throw std::invalid_argument("record_from_decode: traces do not cover the segment (" +
                                std::to_string(traces.size()) + " steps for " +
                                std::to_string(segment_tokens.size()) + " tokens)");
  }
  RelayRecorder rec(spec, source_base_position, snapshot_layer, include_self);
  for (std::size_t t = 0; t < traces.size(); ++t) {
    rec.feed(traces[t], segment_tokens[t], source_base_position + t);
  }
  return rec.finalize();
}

RealignedKeys realign(const RelayCache& cache, std::size_t new_base_position) {
  cache.validate();
  const std::size_t n = cache.segment_len();
  if (new_base_position + n > cache.max_positions) {
    throw std::invalid_argument("realign: base " + std::to_string(new_base_position) +
                                " overflows max_positions " +
                                std::to_string(cache.max_positions));
  }
  RealignedKeys out;
  out.base_position = new_base_position;
  out.k.reserve(cache.num_layers());
  for (const Tensor& layer_k : cache.k_pre) {
    Tensor rotated = layer_k;
    for (std::size_t j = 0; j < n; ++j) {
      rope_rotate_heads(rotated.row(j), cache.num_kv_heads, cache.d_head,
                        static_cast<std::int64_t>(new_base_position + j), cache.theta_base);
    }
    out.k.push_back(std::move(rotated));
  }
  return out;
}

std::vector<std::uint8_t> export_relay_cache(const RelayCache& cache) {
  cache.validate();
  BlobWriter writer;
  for (std::size_t l = 0; l < cache.num_layers(); ++l) {
    writer.add("k_pre." + std::to_string(l), cache.k_pre[l]);
    writer.add("v." + std::to_string(l), cache.v[l]);
  }
  writer.add("hidden_snapshot", cache.hidden_snapshot);
  Tensor inf({cache.influence.size()});
  inf.data = cache.influence;
  writer.add("influence", inf);

  nlohmann::json extra;
  extra["schema_version"] = 1;
  extra["kind"] = "relay-cache";
  extra["num_layers"] = cache.num_layers();
  extra["num_kv_heads"] = cache.num_kv_heads;
  extra["d_head"] = cache.d_head;
  extra["d_model"] = cache.d_model;
  extra["theta_base"] = cache.theta_base;
  extra["max_positions"] = cache.max_positions;
  extra["source_base_position"] = cache.source_base_position;
  extra["snapshot_layer"] = cache.snapshot_layer;
  extra["decode_steps_observed"] = cache.decode_steps_observed;
  extra["segment_tokens"] = cache.segment_tokens;
  return writer.finish(kCacheMagic, std::move(extra));
}

RelayCache import_relay_cache(std::vector<std::uint8_t> bytes) {
  const BlobReader reader = BlobReader::from_bytes(std::move(bytes), kCacheMagic);
  const nlohmann::json& m = reader.manifest();
  RelayCache c;
  try {
    c.num_kv_heads = m.at("num_kv_heads").get<std::size_t>();
    c.d_head = m.at("d_head").get<std::size_t>();
    c.d_model = m.at("d_model").get<std::size_t>();
    c.theta_base = m.at("theta_base").get<float>();
    c.max_positions = m.at("max_positions").get<std::size_t>();
    c.source_base_position = m.at("source_base_position").get<std::size_t>();
    c.snapshot_layer = m.at("snapshot_layer").get<std::size_t>();
    c.decode_steps_observed = m.at("decode_steps_observed").get<std::size_t>();
    c.segment_tokens = m.at("segment_tokens").get<std::vector<TokenId>>();
    const std::size_t layers = m.at("num_layers").get<std::size_t>();
    c.k_pre.reserve(layers);
    c.v.reserve(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      c.k_pre.push_back(reader.get("k_pre." + std::to_string(l)));
      c.v.push_back(reader.get("v." + std::to_string(l)));
    }
    c.hidden_snapshot = reader.get("hidden_snapshot");
    c.influence = reader.get("influence").data;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("relay cache manifest: ") + e.what());
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw SchemaError(std::string("relay cache file: ") + e.what());
  }
  return c;
}

void save_relay_cache(const RelayCache& cache, const std::filesystem::path& path) {
  const auto bytes = export_relay_cache(cache);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

RelayCache load_relay_cache(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return import_relay_cache(std::move(bytes));
}

}  // namespace relaykv
