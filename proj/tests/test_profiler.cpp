// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include <stdexcept>
#include <cmath>

#include "doctest.h"
#include "relaykv/errors.hpp"
#include "relaykv/profiler.hpp"

using namespace relaykv;

namespace {

// 12-layer fixture with a mid-depth dip and a stabilizing tail
const std::vector<double> kDipCurve{0.999, 0.995, 0.97, 0.90, 0.85, 0.88,
                                    0.93,  0.94,  0.945, 0.947, 0.948, 0.948};

// adjacent-layer correlation fixture: rho[l] correlates layers l-1 and l
std::vector<double> planted_rho() {
  return {0.0, 0.2, 0.3, 0.6, 0.8, 0.9, 0.91, 0.92, 0.925, 0.93, 0.932, 0.933};
}

ModelSpec small_spec() {
  ModelSpec s;
  s.num_layers = 8;
  s.d_model = 32;
  s.num_heads = 4;
  s.num_kv_heads = 4;
  s.d_head = 8;
  s.d_ff = 64;
  s.vocab_size = 64;
  s.max_positions = 1024;
  return s;
}

}  // namespace

TEST_CASE("profiler params defaults match the published calibration settings") {
  const ProfilerParams p;
  CHECK(p.tau_start == 0.99);
  CHECK(p.tail_layers == 5);
  CHECK(p.stability_lambda == 2.0);
  CHECK(p.min_rise == 3);
  CHECK(p.consecutive == 2);
}

TEST_CASE("find_start_layer: deepest high-similarity layer before the minimum") {
  const ProfilerParams p;
  CHECK(find_start_layer(kDipCurve, p) == 1);

  // dip only at the last layer: start sits right before it
  std::vector<double> late_dip(12, 1.0);
  late_dip.back() = 0.5;
  CHECK(find_start_layer(late_dip, p) == 10);

  // nothing reaches the threshold
  std::vector<double> low(12, 0.9);
  low[6] = 0.2;
  CHECK(find_start_layer(low, p) == 0);
}

TEST_CASE("find_end_layer: stability-scan hand trace") {
  const ProfilerParams p;
  // tail mean 0.9456, sigma 0.0030074 -> b = 0.9426, step bound 0.0060149
  const EndLayerResult r = find_end_layer(kDipCurve, p);
  CHECK(r.l_end == 8);
  CHECK_FALSE(r.fallback);
}

TEST_CASE("find_end_layer: flat curve stabilizes at the first scanned layer") {
  const ProfilerParams p;
  const std::vector<double> flat(12, 0.95);
  const EndLayerResult r = find_end_layer(flat, p);
  CHECK(r.l_end == 3);  // min at 0, scan starts min_rise layers later
  CHECK_FALSE(r.fallback);
}

TEST_CASE("find_end_layer: curve that never stabilizes falls back to the last layer") {
  const ProfilerParams p;
  const std::vector<double> wild{1.0, 0.99, 0.05, 0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.9};
  const EndLayerResult r = find_end_layer(wild, p);
  CHECK(r.l_end == 11);
  CHECK(r.fallback);
}

TEST_CASE("find_detection_layer: second-order transition hand trace") {
  const ProfilerParams p;
  // rho for layers 1..5; alpha_3 = +0.2, alpha_4 = -0.1
  const std::vector<double> rho{0.0, 0.2, 0.3, 0.6, 0.8, 0.9};
  const DetectionResult r = find_detection_layer(rho, 1, 5, p);
  CHECK(r.l_det == 5);
  CHECK_FALSE(r.fallback);

  // transition at the end layer clamps
  const DetectionResult clamped = find_detection_layer(rho, 1, 4, p);
  CHECK(clamped.l_det == 4);
  CHECK_FALSE(clamped.fallback);
}

TEST_CASE("find_detection_layer: linear correlation trend falls back") {
  const ProfilerParams p;
  std::vector<double> rho(10, 0.0);
  // dyadic slope keeps the second-order differences exactly zero
  for (std::size_t l = 1; l < rho.size(); ++l) rho[l] = 0.0625 * static_cast<double>(l);
  const DetectionResult r = find_detection_layer(rho, 1, 8, p);
  CHECK(r.l_det == 2);
  CHECK(r.fallback);
}

TEST_CASE("find_detection_layer: relaxed first-negative rule") {
  ProfilerParams p;
  p.first_negative_alpha = true;
  // alpha_3 = 0.2 - 0.8 + 0.5 = -0.1: no positive run needed
  const std::vector<double> rho{0.0, 0.5, 0.4, 0.2, 0.15, 0.12, 0.1};
  const DetectionResult r = find_detection_layer(rho, 1, 6, p);
  CHECK(r.l_det == 4);
  CHECK_FALSE(r.fallback);

  p.first_negative_alpha = false;
  const DetectionResult strict = find_detection_layer(rho, 1, 6, p);
  CHECK(strict.fallback);  // alpha never transitions from positive
}

TEST_CASE("profile_from_curve recovers the planted (1, 5, 8) triple") {
  LayerCurve curve;
  curve.s = kDipCurve;
  curve.rho = planted_rho();
  curve.rho_degenerate.assign(curve.s.size(), false);
  curve.rho_degenerate[0] = true;

  const LayerProfile prof = profile_from_curve(curve, ProfilerParams{}, "fixture");
  CHECK(prof.l_start == 1);
  CHECK(prof.l_det == 5);
  CHECK(prof.l_end == 8);
  CHECK(prof.warnings.empty());
  CHECK_NOTHROW(prof.validate(12));
}

TEST_CASE("profile invariant holds on fallback-heavy curves") {
  LayerCurve curve;
  curve.s.assign(12, 0.95);  // flat: start 0, end 3
  curve.rho.assign(12, 0.5);  // constant rho -> detection falls back
  curve.rho_degenerate.assign(12, false);
  const LayerProfile prof = profile_from_curve(curve, ProfilerParams{}, "flat");
  CHECK(prof.l_start <= prof.l_det);
  CHECK(prof.l_det <= prof.l_end);
  CHECK(prof.l_end < 12);
  CHECK_FALSE(prof.warnings.empty());
}

TEST_CASE("profile_model is deterministic and satisfies the ordering invariant") {
  const Weights w = init_weights(small_spec(), 71);
  TwoStageConfig calib;
  calib.seed = 3;
  calib.instances = 2;
  calib.segment_len = 10;
  calib.stage1_prefix_min = 8;
  calib.stage1_prefix_max = 12;
  calib.stage2_prefix_min = 8;
  calib.stage2_prefix_max = 12;

  const ProfilerParams params;
  const LayerProfile a = profile_model(w, calib, params);
  const LayerProfile b = profile_model(w, calib, params);
  CHECK(a.l_start == b.l_start);
  CHECK(a.l_det == b.l_det);
  CHECK(a.l_end == b.l_end);
  CHECK(a.curve_s == b.curve_s);
  CHECK(a.l_start <= a.l_det);
  CHECK(a.l_det <= a.l_end);
  CHECK(a.l_end < w.spec.num_layers);
}

TEST_CASE("appending an identical curve never moves the scans") {
  LayerCurve curve;
  curve.s = kDipCurve;
  curve.rho = planted_rho();
  curve.rho_degenerate.assign(curve.s.size(), false);
  curve.rho_degenerate[0] = true;

  const std::vector<LayerCurve> once{curve};
  const std::vector<LayerCurve> twice{curve, curve, curve};
  const LayerProfile a = profile_from_curve(average_curves(once), ProfilerParams{}, "x");
  const LayerProfile b = profile_from_curve(average_curves(twice), ProfilerParams{}, "x");
  CHECK(a.l_start == b.l_start);
  CHECK(a.l_det == b.l_det);
  CHECK(a.l_end == b.l_end);
}

TEST_CASE("published layer triples load and validate as external profiles") {
  nlohmann::json j;
  j["model_id"] = "external-8b";
  j["l_start"] = 1;
  j["l_det"] = 3;
  j["l_end"] = 18;
  const LayerProfile p = profile_from_json(j);
  CHECK_NOTHROW(p.validate(32));
  CHECK_THROWS_AS(p.validate(18), SchemaError);  // l_end must stay below L

  nlohmann::json bad = j;
  bad["l_det"] = 0;
  CHECK_THROWS_AS(profile_from_json(bad), SchemaError);
}

TEST_CASE("profile JSON round-trip") {
  LayerCurve curve;
  curve.s = kDipCurve;
  curve.rho = planted_rho();
  curve.rho_degenerate.assign(curve.s.size(), false);
  curve.rho_degenerate[0] = true;
  const LayerProfile prof = profile_from_curve(curve, ProfilerParams{}, "fixture");

  const LayerProfile back = profile_from_json(profile_to_json(prof));
  CHECK(back.l_start == prof.l_start);
  CHECK(back.l_det == prof.l_det);
  CHECK(back.l_end == prof.l_end);
  CHECK(back.curve_s == prof.curve_s);
  CHECK(back.curve_rho == prof.curve_rho);
  CHECK(back.params.tau_start == prof.params.tau_start);
}
