// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "relaykv/metrics.hpp"

namespace relaykv {

// Offline calibration: average layer curves over a calibration set, then
// derive the rectification band (l_start, l_end) and the detection layer
// by deterministic scans over the averaged curves.
struct ProfilerParams {
  double tau_start = 0.99;        // similarity floor for the start layer
  std::size_t tail_layers = 5;    // right-tail window for the stability baseline
  double stability_lambda = 2.0;  // step-size multiplier against the tail sigma
  std::size_t consecutive = 2;    // layers that must hold the stability test
  std::size_t min_rise = 3;       // layers past the minimum before the end scan
  bool first_negative_alpha = false;  // relaxed detection rule (first alpha < 0)

  void validate() const;
};

struct LayerProfile {
  std::string model_id;
  std::size_t l_start = 0;
  std::size_t l_det = 0;
  std::size_t l_end = 0;
  ProfilerParams params;
  std::vector<double> curve_s;    // averaged value-cosine similarity per layer
  std::vector<double> curve_rho;  // curve_rho[i] correlates layers i and i+1
  std::vector<std::string> warnings;

  // 0 <= l_start <= l_det <= l_end < num_layers. Externally supplied
  // profiles (published triples) pass through the same check.
  void validate(std::size_t num_layers) const;
};

// Deepest layer before the curve minimum with s >= tau_start; 0 if none.
std::size_t find_start_layer(std::span<const double> s, const ProfilerParams& p);

// Onset of the stable tail regime: first layer from which `consecutive`
// layers all satisfy s >= b and |s_l - s_{l-1}| < lambda * sigma_tail,
// where b = mu_tail - sigma_tail over the last tail_layers entries
// (population sigma). A zero-variance tail accepts exactly-flat steps.
// Falls back to the last layer with a warning.
struct EndLayerResult {
  std::size_t l_end = 0;
  bool fallback = false;
};
EndLayerResult find_end_layer(std::span<const double> s, const ProfilerParams& p);

// First positive-to-negative transition of the second-order difference of
// rho inside (l_start, l_end]; detection happens one layer later. Falls
// back to l_start + 1 with a warning. rho is indexed by layer; rho[0] is
// ignored.
struct DetectionResult {
  std::size_t l_det = 0;
  bool fallback = false;
};
DetectionResult find_detection_layer(std::span<const double> rho, std::size_t l_start,
                                     std::size_t l_end, const ProfilerParams& p);

// Runs the two-stage workload per calibration instance, averages the
// curves pointwise, then applies the scans once to the averaged curves.
LayerProfile profile_model(const Weights& w, const TwoStageConfig& calib,
                           const ProfilerParams& params);

// Scan-only entry point used by tests and external curve sets.
LayerProfile profile_from_curve(const LayerCurve& averaged, const ProfilerParams& params,
                                const std::string& model_id);

nlohmann::json profile_to_json(const LayerProfile& p);
LayerProfile profile_from_json(const nlohmann::json& j);
void save_profile(const LayerProfile& p, const std::filesystem::path& path);
LayerProfile load_profile(const std::filesystem::path& path);

}  // namespace relaykv
