// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <cmath>
#include <random>

#include "doctest.h"
#include "relaykv/errors.hpp"
#include "relaykv/relay_cache.hpp"

using namespace relaykv;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.num_layers = 6;
  s.d_model = 32;
  s.num_heads = 4;
  s.num_kv_heads = 4;
  s.d_head = 8;
  s.d_ff = 64;
  s.vocab_size = 64;
  s.max_positions = 2048;
  return s;
}

struct Recorded {
  KVContext ctx;
  std::vector<StepTrace> traces;
  std::vector<TokenId> segment;
  std::size_t base = 0;
};

// prompt prefill + greedy decode with full capture, traces kept
Recorded run_decode(const Weights& w, std::size_t prompt_len, std::size_t new_tokens) {
  Recorded rec;
  rec.ctx = KVContext(w.spec);
  std::vector<TokenId> prompt(prompt_len);
  for (std::size_t i = 0; i < prompt_len; ++i) {
    prompt[i] = static_cast<TokenId>((i * 5 + 2) % w.spec.vocab_size);
  }
  const PrefillResult p = prefill(w, prompt, rec.ctx, 0);
  rec.base = prompt_len;
  CaptureFlags cap;
  cap.hidden = true;
  cap.pre_rope_keys = true;
  cap.attention = true;
  const StepHook hook = [&](const StepTrace& tr, TokenId, std::size_t) {
    rec.traces.push_back(tr);
  };
  rec.segment =
      greedy_generate(w, rec.ctx, p.logits.row(prompt_len - 1), new_tokens, cap, hook).tokens;
  return rec;
}

// minimal hand-built spec/traces for influence arithmetic (never runs the
// model, so the usual layer-count floor does not apply)
ModelSpec fake_spec(std::size_t layers, std::size_t heads) {
  ModelSpec s;
  s.num_layers = layers;
  s.num_heads = heads;
  s.num_kv_heads = heads;
  s.d_head = 2;
  s.d_model = heads * 2;
  s.d_ff = 4;
  s.vocab_size = 8;
  s.max_positions = 64;
  return s;
}

StepTrace fake_step(const ModelSpec& spec, std::size_t ctx_len,
                    const std::vector<std::vector<float>>& attn_per_layer) {
  StepTrace t;
  t.hidden.assign(spec.num_layers, Tensor({1, spec.d_model}));
  t.k_pre.assign(spec.num_layers, Tensor({1, spec.kv_dim()}));
  t.v.assign(spec.num_layers, Tensor({1, spec.kv_dim()}));
  t.attn.resize(spec.num_layers);
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    Tensor rows({spec.num_heads, ctx_len});
    for (std::size_t h = 0; h < spec.num_heads; ++h) {
      for (std::size_t j = 0; j < ctx_len; ++j) rows.at(h, j) = attn_per_layer[l][j];
    }
    t.attn[l] = {rows};
  }
  return t;
}

}  // namespace

TEST_CASE("single-token segment has zero influence") {
  const Weights w = init_weights(small_spec(), 40);
  const Recorded rec = run_decode(w, 6, 1);
  const RelayCache cache =
      record_from_decode(w.spec, rec.traces, rec.segment, rec.base, 1);
  REQUIRE(cache.influence.size() == 1);
  CHECK(cache.influence[0] == 0.0f);
  CHECK(cache.decode_steps_observed == 1);
}

TEST_CASE("influence equals the hand-summed attention received from later steps") {
  // 2 layers, 1 head, 3-token segment after a 2-token prompt
  const ModelSpec spec = fake_spec(2, 1);
  const std::size_t base = 2;
  // step t has context length base + t + 1; rows are hand-picked
  const std::vector<StepTrace> traces = {
      fake_step(spec, 3, {{0.2f, 0.3f, 0.5f}, {0.1f, 0.1f, 0.8f}}),
      fake_step(spec, 4, {{0.1f, 0.2f, 0.4f, 0.3f}, {0.25f, 0.25f, 0.3f, 0.2f}}),
      fake_step(spec, 5, {{0.1f, 0.1f, 0.2f, 0.3f, 0.3f}, {0.0f, 0.1f, 0.6f, 0.2f, 0.1f}}),
  };
  const std::vector<TokenId> segment = {1, 2, 3};
  const RelayCache cache = record_from_decode(spec, traces, segment, base, 0);

  // positions: segment j sits at absolute base + j = 2 + j
  // s_inf(0): steps 1 and 2 attend onto absolute position 2
  const double expect0 = (0.4 + 0.3) + (0.2 + 0.6);
  // s_inf(1): step 2 onto absolute position 3
  const double expect1 = 0.3 + 0.2;
  CHECK(cache.influence[0] == doctest::Approx(expect0).epsilon(1e-6));
  CHECK(cache.influence[1] == doctest::Approx(expect1).epsilon(1e-6));
  CHECK(cache.influence[2] == 0.0f);

  // ablation flag folds in the self-attention weight of each step
  const RelayCache with_self = record_from_decode(spec, traces, segment, base, 0, true);
  CHECK(with_self.influence[2] == doctest::Approx(0.3 + 0.1).epsilon(1e-6));
  CHECK(with_self.influence[0] == doctest::Approx(expect0 + 0.5 + 0.8).epsilon(1e-6));
}

TEST_CASE("influence under exactly uniform attention matches the closed form") {
  const ModelSpec spec = fake_spec(3, 2);
  const std::size_t base = 4, n = 5;
  std::vector<StepTrace> traces;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t ctx = base + t + 1;
    std::vector<std::vector<float>> uniform(
        spec.num_layers, std::vector<float>(ctx, 1.0f / static_cast<float>(ctx)));
    traces.push_back(fake_step(spec, ctx, uniform));
  }
  const std::vector<TokenId> segment = {0, 1, 2, 3, 4};
  const RelayCache cache = record_from_decode(spec, traces, segment, base, 0);

  const double per_cell = static_cast<double>(spec.num_layers * spec.num_heads);
  for (std::size_t j = 0; j < n; ++j) {
    double expect = 0.0;
    for (std::size_t t = j + 1; t < n; ++t) {
      expect += per_cell / static_cast<double>(base + t + 1);
    }
    CHECK(cache.influence[j] == doctest::Approx(expect).epsilon(1e-5));
  }
  // earlier positions receive at least as much under uniform attention
  for (std::size_t j = 0; j + 1 < n; ++j) CHECK(cache.influence[j] >= cache.influence[j + 1]);
}

TEST_CASE("record rejects traces with missing capture fields by name") {
  const Weights w = init_weights(small_spec(), 4);
  Recorded rec = run_decode(w, 4, 2);
  auto broken = rec.traces;
  for (auto& t : broken) t.attn.clear();
  CHECK_THROWS_WITH_AS(
      record_from_decode(w.spec, broken, rec.segment, rec.base, 0),
      "recorder: capture missing field 'attention'", std::invalid_argument);

  broken = rec.traces;
  for (auto& t : broken) t.hidden.clear();
  CHECK_THROWS_WITH_AS(record_from_decode(w.spec, broken, rec.segment, rec.base, 0),
                       "recorder: capture missing field 'hidden'", std::invalid_argument);
}

TEST_CASE("realign at the source base reproduces decode-time keys bit-exactly") {
  const Weights w = init_weights(small_spec(), 8);
  const Recorded rec = run_decode(w, 10, 6);
  const RelayCache cache =
      record_from_decode(w.spec, rec.traces, rec.segment, rec.base, 2);

  const RealignedKeys keys = realign(cache, rec.base);
  for (std::size_t l = 0; l < w.spec.num_layers; ++l) {
    for (std::size_t j = 0; j < cache.segment_len(); ++j) {
      const auto expect = rec.ctx.key_row(l, rec.base + j);
      const auto got = keys.k[l].row(j);
      CHECK(std::equal(expect.begin(), expect.end(), got.begin()));
    }
  }
}

TEST_CASE("realign is stateless and leaves the cache untouched") {
  const Weights w = init_weights(small_spec(), 15);
  const Recorded rec = run_decode(w, 5, 4);
  const RelayCache cache =
      record_from_decode(w.spec, rec.traces, rec.segment, rec.base, 0);
  const std::vector<float> influence_before = cache.influence;
  const Tensor k_pre_before = cache.k_pre[3];

  const RealignedKeys at_20 = realign(cache, 20);
  const RealignedKeys at_100 = realign(cache, 100);
  const RealignedKeys at_20_again = realign(cache, 20);

  CHECK(cache.k_pre[3].bit_equal(k_pre_before));
  CHECK(cache.influence == influence_before);
  for (std::size_t l = 0; l < w.spec.num_layers; ++l) {
    CHECK(at_20.k[l].bit_equal(at_20_again.k[l]));
    CHECK_FALSE(at_20.k[l].bit_equal(at_100.k[l]));
  }
  CHECK_THROWS_AS(realign(cache, w.spec.max_positions), std::invalid_argument);
}

TEST_CASE("realigned keys preserve attention scores at matching relative distances") {
  const Weights w = init_weights(small_spec(), 23);
  const Recorded rec = run_decode(w, 8, 6);
  const RelayCache cache =
      record_from_decode(w.spec, rec.traces, rec.segment, rec.base, 0);
  const ModelSpec& spec = w.spec;
  const std::size_t n = cache.segment_len();

  std::mt19937 rng(99);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> q_content(spec.q_dim());
  for (float& v : q_content) v = dist(rng);

  const auto scores_at = [&](std::size_t seg_base) {
    const RealignedKeys keys = realign(cache, seg_base);
    std::vector<float> q = q_content;
    rope_rotate_heads(q, spec.num_heads, spec.d_head,
                      static_cast<std::int64_t>(seg_base + n), spec.theta_base);
    std::vector<double> scores;
    const float scale = 1.0f / std::sqrt(static_cast<float>(spec.d_head));
    for (std::size_t l = 0; l < spec.num_layers; ++l) {
      for (std::size_t h = 0; h < spec.num_heads; ++h) {
        const std::size_t kvh = h / spec.head_group();
        for (std::size_t j = 0; j < n; ++j) {
          float s = 0.0f;
          for (std::size_t d = 0; d < spec.d_head; ++d) {
            s += q[h * spec.d_head + d] * keys.k[l].row(j)[kvh * spec.d_head + d];
          }
          scores.push_back(s * scale);
        }
      }
    }
    return scores;
  };

  const auto ref = scores_at(rec.base);
  for (const std::size_t delta : {1u, 7u, 64u, 500u}) {
    const auto shifted = scores_at(rec.base + delta);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(ref[i] - shifted[i]) <= 1e-5);
    }
  }
}

TEST_CASE("cache export/import is the identity") {
  const Weights w = init_weights(small_spec(), 31);
  const Recorded rec = run_decode(w, 7, 5);
  const RelayCache cache =
      record_from_decode(w.spec, rec.traces, rec.segment, rec.base, 1);

  const auto bytes = export_relay_cache(cache);
  const RelayCache back = import_relay_cache(bytes);

  CHECK(back.segment_tokens == cache.segment_tokens);
  CHECK(back.source_base_position == cache.source_base_position);
  CHECK(back.snapshot_layer == cache.snapshot_layer);
  CHECK(back.decode_steps_observed == cache.decode_steps_observed);
  CHECK(back.influence == cache.influence);
  CHECK(back.hidden_snapshot.bit_equal(cache.hidden_snapshot));
  for (std::size_t l = 0; l < cache.num_layers(); ++l) {
    CHECK(back.k_pre[l].bit_equal(cache.k_pre[l]));
    CHECK(back.v[l].bit_equal(cache.v[l]));
  }

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  CHECK_THROWS_AS(import_relay_cache(truncated), SchemaError);

  RelayCache empty;
  CHECK_THROWS_AS(export_relay_cache(empty), std::invalid_argument);
}
