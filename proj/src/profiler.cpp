// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/profiler.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "relaykv/errors.hpp"

namespace relaykv {

void ProfilerParams::validate() const {
  if (!(tau_start > 0.0 && tau_start <= 1.0)) {
    throw std::invalid_argument("profiler params: tau_start must be in (0, 1]");
  }
  if (tail_layers < 2) throw std::invalid_argument("profiler params: tail_layers must be >= 2");
  if (!(stability_lambda > 0.0)) {
    throw std::invalid_argument("profiler params: stability_lambda must be > 0");
  }
  if (consecutive < 1) throw std::invalid_argument("profiler params: consecutive must be >= 1");
  if (min_rise < 1) throw std::invalid_argument("profiler params: min_rise must be >= 1");
}

void LayerProfile::validate(std::size_t num_layers) const {
  if (!(l_start <= l_det && l_det <= l_end && l_end < num_layers)) {
    throw SchemaError("layer profile violates l_start <= l_det <= l_end < num_layers (" +
                      std::to_string(l_start) + ", " + std::to_string(l_det) + ", " +
                      std::to_string(l_end) + ") for " + std::to_string(num_layers) +
                      " layers");
  }
}

namespace {

std::size_t argmin_first(std::span<const double> s) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < s.size(); ++i) {
    if (s[i] < s[best]) best = i;
  }
  return best;
}

}  // namespace

std::size_t find_start_layer(std::span<const double> s, const ProfilerParams& p) {
  p.validate();
  if (s.size() < 6) throw std::invalid_argument("find_start_layer: curve shorter than 6");
  const std::size_t l_min = argmin_first(s);
  for (std::size_t l = l_min; l-- > 0;) {
    if (s[l] >= p.tau_start) return l;
  }
  return 0;
}

EndLayerResult find_end_layer(std::span<const double> s, const ProfilerParams& p) {
  p.validate();
  const std::size_t layers = s.size();
  if (layers < p.tail_layers + 2) {
    throw std::invalid_argument("find_end_layer: curve shorter than tail_layers + 2");
  }

  double mu = 0.0;
  for (std::size_t l = layers - p.tail_layers; l < layers; ++l) mu += s[l];
  mu /= static_cast<double>(p.tail_layers);
  double var = 0.0;
  for (std::size_t l = layers - p.tail_layers; l < layers; ++l) {
    var += (s[l] - mu) * (s[l] - mu);
  }
  var /= static_cast<double>(p.tail_layers);  // population sigma: fixed window
  const double sigma = std::sqrt(var);
  const double baseline = mu - sigma;
  const double max_step = p.stability_lambda * sigma;

  const std::size_t l_min = argmin_first(s);
  const std::size_t scan_start = std::max(l_min + p.min_rise, l_min + 1);
  for (std::size_t l = scan_start; l + p.consecutive <= layers; ++l) {
    bool ok = true;
    for (std::size_t w = l; w < l + p.consecutive; ++w) {
      const double step = std::abs(s[w] - s[w - 1]);
      // zero-variance tail: only an exactly flat step counts as stable
      const bool stable = sigma > 0.0 ? step < max_step : step == 0.0;
      if (!(s[w] >= baseline && stable)) {
        ok = false;
        break;
      }
    }
    if (ok) return {l, false};
  }
  return {layers - 1, true};
}

DetectionResult find_detection_layer(std::span<const double> rho, std::size_t l_start,
                                     std::size_t l_end, const ProfilerParams& p) {
  p.validate();
  if (l_start >= l_end) {
    throw std::invalid_argument("find_detection_layer: requires l_start < l_end");
  }
  if (rho.size() <= l_end) {
    throw std::invalid_argument("find_detection_layer: rho not defined up to l_end");
  }
  const auto alpha = [&](std::size_t l) { return rho[l] - 2.0 * rho[l - 1] + rho[l - 2]; };

  // rho starts at index 1, so alpha exists from 3; the transition rule also
  // needs alpha at l-1.
  const std::size_t first = std::max<std::size_t>(l_start + 2, p.first_negative_alpha ? 3 : 4);
  for (std::size_t l = first; l <= l_end; ++l) {
    const bool hit =
        p.first_negative_alpha ? alpha(l) < 0.0 : (alpha(l - 1) > 0.0 && alpha(l) < 0.0);
    if (hit) return {std::min(l + 1, l_end), false};
  }
  return {l_start + 1, true};
}

LayerProfile profile_from_curve(const LayerCurve& averaged, const ProfilerParams& params,
                                const std::string& model_id) {
  params.validate();
  const std::size_t layers = averaged.s.size();
  if (layers < std::max<std::size_t>(6, params.tail_layers + 2)) {
    throw std::invalid_argument("profile_from_curve: too few layers for the scans");
  }

  LayerProfile prof;
  prof.model_id = model_id;
  prof.params = params;
  prof.curve_s = averaged.s;
  prof.curve_rho.assign(layers > 1 ? layers - 1 : 0, 0.0);
  for (std::size_t l = 1; l < layers; ++l) {
    prof.curve_rho[l - 1] = averaged.rho_degenerate[l] ? 0.0 : averaged.rho[l];
  }

  prof.l_start = find_start_layer(averaged.s, params);
  const EndLayerResult end = find_end_layer(averaged.s, params);
  prof.l_end = end.l_end;
  if (end.fallback) prof.warnings.push_back("end-layer scan found no stable window; using last layer");

  // rho indexed by layer for the scan; l_start < l_end always holds here
  // (the start layer sits strictly below the curve minimum, the end scan
  // begins strictly above it).
  std::vector<double> rho_by_layer(layers, 0.0);
  for (std::size_t l = 1; l < layers; ++l) rho_by_layer[l] = prof.curve_rho[l - 1];
  const DetectionResult det =
      find_detection_layer(rho_by_layer, prof.l_start, prof.l_end, params);
  prof.l_det = det.l_det;
  if (det.fallback) {
    prof.warnings.push_back("no correlation-trend transition; detection at l_start + 1");
  }
  prof.validate(layers);
  return prof;
}

LayerProfile profile_model(const Weights& w, const TwoStageConfig& calib,
                           const ProfilerParams& params) {
  params.validate();
  calib.validate();
  std::vector<LayerCurve> curves;
  curves.reserve(calib.instances);
  for (std::size_t i = 0; i < calib.instances; ++i) {
    try {
      const TwoStageInstance inst = make_two_stage_instance(w, calib, i);
      const ComparisonPair pair =
          build_comparison_setting(w, inst, ComparisonSetting::kDecoding);
      const DeviationMatrix dev =
          token_deviation(pair.reuse, pair.full, w.spec.num_kv_heads);
      curves.push_back(make_layer_curve(dev));
    } catch (const std::exception& e) {
      throw std::runtime_error("calibration instance " + std::to_string(i) + ": " + e.what());
    }
  }
  const LayerCurve averaged = average_curves(curves);
  return profile_from_curve(averaged, params, w.model_id);
}

// ---------------------------------------------------------------------------
// JSON round-trip
// ---------------------------------------------------------------------------

nlohmann::json profile_to_json(const LayerProfile& p) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["model_id"] = p.model_id;
  j["l_start"] = p.l_start;
  j["l_det"] = p.l_det;
  j["l_end"] = p.l_end;
  j["params"] = {
      {"tau_start", p.params.tau_start},
      {"tail_layers", p.params.tail_layers},
      {"stability_lambda", p.params.stability_lambda},
      {"consecutive", p.params.consecutive},
      {"min_rise", p.params.min_rise},
      {"first_negative_alpha", p.params.first_negative_alpha},
  };
  // curves.rho[i] correlates layers i and i+1
  j["curves"] = {{"s", p.curve_s}, {"rho", p.curve_rho}};
  j["warnings"] = p.warnings;
  return j;
}

LayerProfile profile_from_json(const nlohmann::json& j) {
  LayerProfile p;
  try {
    p.model_id = j.value("model_id", std::string{});
    p.l_start = j.at("l_start").get<std::size_t>();
    p.l_det = j.at("l_det").get<std::size_t>();
    p.l_end = j.at("l_end").get<std::size_t>();
    if (j.contains("params")) {
      const auto& q = j["params"];
      p.params.tau_start = q.value("tau_start", p.params.tau_start);
      p.params.tail_layers = q.value("tail_layers", p.params.tail_layers);
      p.params.stability_lambda = q.value("stability_lambda", p.params.stability_lambda);
      p.params.consecutive = q.value("consecutive", p.params.consecutive);
      p.params.min_rise = q.value("min_rise", p.params.min_rise);
      p.params.first_negative_alpha =
          q.value("first_negative_alpha", p.params.first_negative_alpha);
    }
    if (j.contains("curves")) {
      p.curve_s = j["curves"].value("s", std::vector<double>{});
      p.curve_rho = j["curves"].value("rho", std::vector<double>{});
    }
    p.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("layer profile: ") + e.what());
  }
  if (!(p.l_start <= p.l_det && p.l_det <= p.l_end)) {
    throw SchemaError("layer profile violates l_start <= l_det <= l_end");
  }
  return p;
}

void save_profile(const LayerProfile& p, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << profile_to_json(p).dump(2) << "\n";
  if (!f) throw IoError("write failed: " + path.string());
}

LayerProfile load_profile(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("profile JSON parse error: " + std::string(e.what()));
  }
  return profile_from_json(j);
}

}  // namespace relaykv
