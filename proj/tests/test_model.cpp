// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "relaykv/model.hpp"

using namespace relaykv;

namespace {

ModelSpec small_spec(std::size_t kv_heads = 4) {
  ModelSpec s;
  s.num_layers = 6;
  s.d_model = 32;
  s.num_heads = 4;
  s.num_kv_heads = kv_heads;
  s.d_head = 8;
  s.d_ff = 64;
  s.vocab_size = 64;
  s.max_positions = 1024;
  return s;
}

std::vector<TokenId> tokens_mod(std::size_t n, std::size_t vocab, std::size_t stride = 7) {
  std::vector<TokenId> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<TokenId>((i * stride + 3) % vocab);
  return t;
}

double max_abs(std::span<const float> a, std::span<const float> b) {
  double mx = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    mx = std::max(mx, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return mx;
}

}  // namespace

TEST_CASE("init_weights determinism and shapes") {
  ModelSpec spec = small_spec();
  spec.d_model = 64;
  spec.d_head = 16;
  const Weights a = init_weights(spec, 123);
  const Weights b = init_weights(spec, 123);
  CHECK(a.embedding.bit_equal(b.embedding));
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    CHECK(a.layers[l].w_q.bit_equal(b.layers[l].w_q));
    CHECK(a.layers[l].w_down.bit_equal(b.layers[l].w_down));
  }
  CHECK(a.output_head.bit_equal(b.output_head));

  const Weights c = init_weights(spec, 124);
  CHECK_FALSE(a.embedding.bit_equal(c.embedding));

  CHECK(a.layers[0].w_q.shape == std::vector<std::size_t>{64, 64});
}

TEST_CASE("model spec validation") {
  ModelSpec bad = small_spec();
  bad.num_layers = 5;
  CHECK_THROWS(bad.validate());
  bad = small_spec();
  bad.d_model = 30;
  CHECK_THROWS(bad.validate());
  bad = small_spec();
  bad.num_kv_heads = 3;
  CHECK_THROWS(bad.validate());
  CHECK_NOTHROW(small_spec().validate());
  CHECK_NOTHROW(small_spec(2).validate());  // grouped KV heads
}

TEST_CASE("prefill and token-by-token decode agree") {
  for (const std::size_t kv_heads : {std::size_t{4}, std::size_t{2}}) {
    const Weights w = init_weights(small_spec(kv_heads), 9);
    const auto tokens = tokens_mod(12, w.spec.vocab_size);

    KVContext full_ctx(w.spec);
    const PrefillResult full = prefill(w, tokens, full_ctx, 0);

    KVContext inc_ctx(w.spec);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const PrefillResult step = decode_step(w, tokens[t], inc_ctx, t);
      CHECK(max_abs(full.logits.row(t), step.logits.row(0)) <= 1e-5);
    }
    // the KV paths are in fact bit-identical
    for (std::size_t l = 0; l < w.spec.num_layers; ++l) {
      for (std::size_t p = 0; p < tokens.size(); ++p) {
        const auto a = full_ctx.key_row(l, p);
        const auto b = inc_ctx.key_row(l, p);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
      }
    }
  }
}

TEST_CASE("chunked prefill equals one-shot prefill") {
  const Weights w = init_weights(small_spec(), 5);
  const auto tokens = tokens_mod(16, w.spec.vocab_size);

  KVContext one_ctx(w.spec);
  const PrefillResult one = prefill(w, tokens, one_ctx, 0);

  KVContext two_ctx(w.spec);
  const std::span<const TokenId> all(tokens);
  prefill(w, all.subspan(0, 10), two_ctx, 0);
  const PrefillResult second = prefill(w, all.subspan(10), two_ctx, 10);

  CHECK(max_abs(one.logits.row(15), second.logits.row(5)) <= 1e-5);
}

TEST_CASE("single token over empty past attends only to itself") {
  const Weights w = init_weights(small_spec(), 2);
  KVContext ctx(w.spec);
  CaptureFlags cap;
  cap.attention = true;
  const PrefillResult r = prefill(w, std::vector<TokenId>{5}, ctx, 0, cap);
  for (std::size_t h = 0; h < w.spec.num_heads; ++h) {
    CHECK(r.trace.attn[0][0].row(h).size() == 1);
    CHECK(r.trace.attn[0][0].row(h)[0] == 1.0f);
  }
  CHECK(r.logits.cols() == w.spec.vocab_size);
}

TEST_CASE("causality: perturbing a later token never changes earlier logits") {
  const Weights w = init_weights(small_spec(), 21);
  auto tokens = tokens_mod(10, w.spec.vocab_size);

  KVContext ctx_a(w.spec);
  const PrefillResult a = prefill(w, tokens, ctx_a, 0);

  tokens[7] = 0;  // zero a later token
  KVContext ctx_b(w.spec);
  const PrefillResult b = prefill(w, tokens, ctx_b, 0);

  for (std::size_t t = 0; t < 7; ++t) {
    const auto ra = a.logits.row(t);
    const auto rb = b.logits.row(t);
    CHECK(std::equal(ra.begin(), ra.end(), rb.begin()));
  }
}

TEST_CASE("rope relative-position identity holds across large shifts") {
  std::mt19937 rng(17);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> q(16), k(16);
  for (float& v : q) v = dist(rng);
  for (float& v : k) v = dist(rng);

  const auto dot = [](std::span<const float> a, std::span<const float> b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d += static_cast<double>(a[i]) * b[i];
    return d;
  };

  const std::int64_t m = 13, n = 5;
  const double ref = dot(rope_rotated(q, m, 10000.0f), rope_rotated(k, n, 10000.0f));
  for (const std::int64_t delta : {1, 7, 64, 500, 900}) {
    const double shifted =
        dot(rope_rotated(q, m + delta, 10000.0f), rope_rotated(k, n + delta, 10000.0f));
    CHECK(std::abs(shifted - ref) <= 1e-5);
  }
}

TEST_CASE("greedy generation is deterministic and bounded") {
  const Weights w = init_weights(small_spec(), 33);
  const auto prompt = tokens_mod(8, w.spec.vocab_size);

  const auto run = [&] {
    KVContext ctx(w.spec);
    const PrefillResult p = prefill(w, prompt, ctx, 0);
    return greedy_generate(w, ctx, p.logits.row(prompt.size() - 1), 8).tokens;
  };
  const auto t1 = run();
  const auto t2 = run();
  CHECK(t1.size() == 8);
  CHECK(t1 == t2);
}

TEST_CASE("position overflow is rejected") {
  ModelSpec spec = small_spec();
  spec.max_positions = 8;
  const Weights w = init_weights(spec, 1);
  KVContext ctx(w.spec);
  CHECK_THROWS_AS(prefill(w, tokens_mod(9, spec.vocab_size), ctx, 0), std::invalid_argument);
}

TEST_CASE("prefill validates base position against the context") {
  const Weights w = init_weights(small_spec(), 2);
  KVContext ctx(w.spec);
  prefill(w, tokens_mod(4, w.spec.vocab_size), ctx, 0);
  CHECK_THROWS_AS(prefill(w, tokens_mod(2, w.spec.vocab_size), ctx, 3), std::invalid_argument);
}
