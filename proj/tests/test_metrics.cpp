// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "relaykv/metrics.hpp"

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
  s.max_positions = 1024;
  return s;
}

SegmentKV random_kv(std::mt19937& rng, std::size_t layers, std::size_t n, std::size_t width) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  SegmentKV kv;
  for (std::size_t l = 0; l < layers; ++l) {
    Tensor k({n, width}), v({n, width});
    for (float& x : k.data) x = dist(rng);
    for (float& x : v.data) x = dist(rng);
    kv.k_pre.push_back(std::move(k));
    kv.v.push_back(std::move(v));
  }
  return kv;
}

// brute-force oracle: explicit rank assignment plus the computational
// Pearson formula, an independent route from the implementation
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const auto ranks = [](const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      if (v[a] != v[b]) return v[a] < v[b];
      return a < b;
    });
    std::vector<double> r(n);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      double sum = 0.0;
      for (std::size_t k = i; k <= j; ++k) sum += static_cast<double>(k + 1);
      const double mean = sum / static_cast<double>(j - i + 1);
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += rx[i];
    sy += ry[i];
    sxx += rx[i] * rx[i];
    syy += ry[i] * ry[i];
    sxy += rx[i] * ry[i];
  }
  const double num = n * sxy - sx * sy;
  const double den = std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
  return den == 0.0 ? 0.0 : num / den;
}

}  // namespace

TEST_CASE("token deviation: identical caches give exact zeros") {
  std::mt19937 rng(1);
  const SegmentKV kv = random_kv(rng, 4, 5, 16);
  const DeviationMatrix dev = token_deviation(kv, kv, 4);
  for (double d : dev.value_cos) CHECK(d == 0.0);
  for (double d : dev.key_cos) CHECK(d == 0.0);
  for (double d : dev.value_norm) CHECK(d == 0.0);
  for (double d : dev.key_norm) CHECK(d == 0.0);
}

TEST_CASE("token deviation: negated values are antipodal (d == 2)") {
  std::mt19937 rng(2);
  const SegmentKV full = random_kv(rng, 3, 4, 16);
  SegmentKV reuse = full;
  for (auto& t : reuse.v) {
    for (float& x : t.data) x = -x;
  }
  const DeviationMatrix dev = token_deviation(reuse, full, 4);
  for (double d : dev.value_cos) CHECK(d == doctest::Approx(2.0).epsilon(1e-9));
  for (double d : dev.key_cos) CHECK(d == 0.0);  // keys untouched
}

TEST_CASE("token deviation: two heads with cosines 1.0 and 0.5 give d = 0.25") {
  SegmentKV full, reuse;
  // one layer, one position, two heads of width 2
  Tensor fv({1, 4}), rv({1, 4});
  // head 0 identical
  fv.at(0, 0) = 1.0f;
  fv.at(0, 1) = 0.0f;
  rv.at(0, 0) = 1.0f;
  rv.at(0, 1) = 0.0f;
  // head 1 at 60 degrees: cos = 0.5
  fv.at(0, 2) = 1.0f;
  fv.at(0, 3) = 0.0f;
  rv.at(0, 2) = 0.5f;
  rv.at(0, 3) = std::sqrt(3.0f) / 2.0f;
  full.v = {fv};
  reuse.v = {rv};
  full.k_pre = {fv};
  reuse.k_pre = {fv};
  const DeviationMatrix dev = token_deviation(reuse, full, 2);
  CHECK(dev.value_cos[0] == doctest::Approx(0.25).epsilon(1e-6));
}

TEST_CASE("layer similarity from deviation columns") {
  DeviationMatrix dev;
  dev.segment_len = 2;
  dev.num_layers = 2;
  dev.value_cos = {0.1, 0.0, 0.3, 0.0};  // layer 0 column: [0.1, 0.3]
  dev.key_cos = dev.value_norm = dev.key_norm = dev.value_cos;
  const auto s = layer_similarity(dev);
  CHECK(s[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(s[1] == doctest::Approx(1.0).epsilon(1e-12));

  DeviationMatrix single;
  single.segment_len = 1;
  single.num_layers = 1;
  single.value_cos = {0.4};
  single.key_cos = single.value_norm = single.key_norm = single.value_cos;
  CHECK(layer_similarity(single)[0] == doctest::Approx(0.6));

  DeviationMatrix empty;
  empty.segment_len = 0;
  empty.num_layers = 2;
  CHECK_THROWS_AS(layer_similarity(empty), std::invalid_argument);
}

TEST_CASE("deviation matrices match a naive per-head loop oracle exactly") {
  std::mt19937 rng(3);
  const std::size_t layers = 3, n = 6, heads = 4, dh = 4;
  const SegmentKV reuse = random_kv(rng, layers, n, heads * dh);
  const SegmentKV full = random_kv(rng, layers, n, heads * dh);
  const DeviationMatrix dev = token_deviation(reuse, full, heads);

  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum_cos = 0.0;
      for (std::size_t h = 0; h < heads; ++h) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t d = 0; d < dh; ++d) {
          const double a = reuse.v[l].at(j, h * dh + d);
          const double b = full.v[l].at(j, h * dh + d);
          dot += a * b;
          na += a * a;
          nb += b * b;
        }
        sum_cos += dot / (std::sqrt(na) * std::sqrt(nb));
      }
      const double expect = 1.0 - sum_cos / static_cast<double>(heads);
      CHECK(dev.at(MetricKind::kValueCos, j, l) == expect);

      // layer similarity is the plain mean of (1 - d) over positions
      double mean = 0.0;
      for (std::size_t jj = 0; jj < n; ++jj) {
        mean += 1.0 - dev.at(MetricKind::kValueCos, jj, l);
      }
      mean /= static_cast<double>(n);
      CHECK(layer_similarity(dev)[l] == mean);
    }
  }
}

TEST_CASE("spearman basics") {
  const std::vector<double> v{0.3, 1.2, -0.5, 2.0, 0.9};
  CHECK(spearman(v, v).rho == doctest::Approx(1.0));

  std::vector<double> rev = v;
  for (double& x : rev) x = -x;
  CHECK(spearman(v, rev).rho == doctest::Approx(-1.0));

  const std::vector<double> x{1, 1, 2}, y{1, 2, 3};
  const auto r = spearman(x, y);
  CHECK_FALSE(r.degenerate);
  CHECK(r.rho == doctest::Approx(1.5 / std::sqrt(3.0)).epsilon(1e-12));

  const std::vector<double> constant{2, 2, 2, 2};
  const auto d = spearman(constant, std::vector<double>{1, 2, 3, 4});
  CHECK(d.degenerate);
  CHECK(d.rho == 0.0);

  CHECK_THROWS_AS(spearman(std::vector<double>{1.0}, std::vector<double>{2.0}),
                  std::invalid_argument);
}

TEST_CASE("spearman is invariant under strictly monotone transforms") {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  for (int iter = 0; iter < 50; ++iter) {
    std::vector<double> x(20), y(20);
    for (double& v : x) v = dist(rng);
    for (double& v : y) v = dist(rng);
    const double base = spearman(x, y).rho;

    std::vector<double> ex = x;
    for (double& v : ex) v = std::exp(v);
    CHECK(spearman(ex, y).rho == doctest::Approx(base).epsilon(1e-9));

    std::vector<double> affine = y;
    for (double& v : affine) v = 3.5 * v + 11.0;
    CHECK(spearman(x, affine).rho == doctest::Approx(base).epsilon(1e-9));
  }
}

TEST_CASE("spearman matches the brute-force oracle to 1e-9 on 1000 vectors with ties") {
  std::mt19937 rng(13);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  std::uniform_int_distribution<int> coarse(-3, 3);
  for (int iter = 0; iter < 1000; ++iter) {
    const std::size_t n = 3 + rng() % 30;
    std::vector<double> x(n), y(n);
    const bool with_ties = iter % 2 == 0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = with_ties ? static_cast<double>(coarse(rng)) : dist(rng);
      y[i] = with_ties ? static_cast<double>(coarse(rng)) : dist(rng);
    }
    const auto got = spearman(x, y);
    const double want = spearman_oracle(x, y);
    if (got.degenerate) {
      CHECK(want == 0.0);
    } else {
      CHECK(std::abs(got.rho - want) <= 1e-9);
    }
  }
}

TEST_CASE("decoding setting with an unchanged prefix has zero deviation") {
  const Weights w = init_weights(small_spec(), 55);
  TwoStageConfig cfg;
  cfg.seed = 5;
  cfg.instances = 1;
  cfg.segment_len = 6;
  cfg.stage1_prefix_min = cfg.stage1_prefix_max = 10;
  cfg.identical_prefix = true;
  const TwoStageInstance inst = make_two_stage_instance(w, cfg, 0);
  CHECK(inst.stage2_prefix == inst.stage1_prefix);

  const ComparisonPair pair = build_comparison_setting(w, inst, ComparisonSetting::kDecoding);
  const DeviationMatrix dev = token_deviation(pair.reuse, pair.full, w.spec.num_kv_heads);
  for (double d : dev.value_cos) CHECK(d == 0.0);
  for (double d : dev.key_cos) CHECK(d == 0.0);
  for (double s : layer_similarity(dev)) CHECK(s == 1.0);
}

TEST_CASE("random setting is reproducible and far less aligned than decoding") {
  const Weights w = init_weights(small_spec(), 56);
  TwoStageConfig cfg;
  cfg.seed = 9;
  cfg.instances = 3;
  cfg.segment_len = 8;
  double decoding_sim = 0.0, random_sim = 0.0;
  for (std::size_t i = 0; i < cfg.instances; ++i) {
    const TwoStageInstance inst = make_two_stage_instance(w, cfg, i);
    const auto pair_d = build_comparison_setting(w, inst, ComparisonSetting::kDecoding);
    const auto pair_r = build_comparison_setting(w, inst, ComparisonSetting::kRandom);
    const auto pair_r2 = build_comparison_setting(w, inst, ComparisonSetting::kRandom);
    for (std::size_t l = 0; l < w.spec.num_layers; ++l) {
      CHECK(pair_r.reuse.v[l].bit_equal(pair_r2.reuse.v[l]));  // determinism
    }
    const auto dev_d = token_deviation(pair_d.reuse, pair_d.full, w.spec.num_kv_heads);
    const auto dev_r = token_deviation(pair_r.reuse, pair_r.full, w.spec.num_kv_heads);
    for (std::size_t l = 0; l < w.spec.num_layers; ++l) {
      decoding_sim += layer_similarity(dev_d)[l];
      random_sim += layer_similarity(dev_r)[l];
    }
  }
  CHECK(decoding_sim > random_sim);
}

TEST_CASE("independent setting differs from the reference") {
  const Weights w = init_weights(small_spec(), 57);
  TwoStageConfig cfg;
  cfg.seed = 2;
  cfg.instances = 1;
  cfg.segment_len = 6;
  const TwoStageInstance inst = make_two_stage_instance(w, cfg, 0);
  const auto pair = build_comparison_setting(w, inst, ComparisonSetting::kIndependent);
  const auto dev = token_deviation(pair.reuse, pair.full, w.spec.num_kv_heads);
  double total = 0.0;
  for (double d : dev.value_cos) total += d;
  CHECK(total > 0.0);
}

TEST_CASE("curve averaging is idempotent on identical curves") {
  DeviationMatrix dev;
  dev.segment_len = 3;
  dev.num_layers = 6;
  dev.value_cos.resize(18);
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> dist(0.0, 0.5);
  for (double& d : dev.value_cos) d = dist(rng);
  dev.key_cos = dev.value_norm = dev.key_norm = dev.value_cos;

  const LayerCurve one = make_layer_curve(dev);
  const std::vector<LayerCurve> two{one, one};
  const LayerCurve avg = average_curves(two);
  for (std::size_t l = 0; l < one.s.size(); ++l) {
    CHECK(avg.s[l] == doctest::Approx(one.s[l]).epsilon(1e-12));
    if (l >= 1 && !one.rho_degenerate[l]) {
      CHECK(avg.rho[l] == doctest::Approx(one.rho[l]).epsilon(1e-12));
    }
  }
}
