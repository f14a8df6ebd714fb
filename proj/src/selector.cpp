// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#include "relaykv/selector.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

namespace relaykv {

void SelectionThresholds::validate() const {
  if (!(tau_dev > 0.0)) throw std::invalid_argument("thresholds: tau_dev must be > 0");
  if (!(tau_inf > 0.0)) throw std::invalid_argument("thresholds: tau_inf must be > 0");
}

bool SelectionSet::contains(std::size_t idx) const {
  return std::binary_search(indices.begin(), indices.end(), idx);
}

std::size_t SelectionSet::count_tag(unsigned tag) const {
  std::size_t n = 0;
  for (unsigned t : tags) {
    if (t & tag) ++n;
  }
  return n;
}

namespace {

SelectionSet mean_relative(std::span<const double> scores, double tau, unsigned tag,
                           const char* what) {
  if (scores.empty()) throw std::invalid_argument(std::string(what) + ": empty segment");
  if (!(tau > 0.0)) throw std::invalid_argument(std::string(what) + ": tau must be > 0");
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(scores.size());

  SelectionSet out;
  if (mean <= 0.0) return out;  // no signal, select nothing
  const double threshold = tau * mean;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] >= threshold) {
      out.indices.push_back(j);
      out.tags.push_back(tag);
    }
  }
  return out;
}

}  // namespace

SelectionSet select_deviation(std::span<const double> s_dev, double tau_dev) {
  return mean_relative(s_dev, tau_dev, kSelDeviation, "select_deviation");
}

SelectionSet select_influence(std::span<const double> s_inf, double tau_inf) {
  return mean_relative(s_inf, tau_inf, kSelInfluenceScore, "select_influence");
}

SelectionSet suffix_set(std::size_t n, std::size_t suffix_k) {
  SelectionSet out;
  const std::size_t start = suffix_k >= n ? 0 : n - suffix_k;
  for (std::size_t j = start; j < n && suffix_k > 0; ++j) {
    out.indices.push_back(j);
    out.tags.push_back(kSelInfluenceSuffix);
  }
  return out;
}

SelectionSet final_selection(const SelectionSet& dev, const SelectionSet& inf_score,
                             const SelectionSet& suffix) {
  std::map<std::size_t, unsigned> merged;
  for (const SelectionSet* s : {&dev, &inf_score, &suffix}) {
    for (std::size_t i = 0; i < s->indices.size(); ++i) {
      merged[s->indices[i]] |= s->tags[i];
    }
  }
  SelectionSet out;
  out.indices.reserve(merged.size());
  out.tags.reserve(merged.size());
  for (const auto& [idx, tag] : merged) {
    out.indices.push_back(idx);
    out.tags.push_back(tag);
  }
  return out;
}

SelectionSet top_k_by_score(std::span<const double> scores, std::size_t count, unsigned tag) {
  count = std::min(count, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(count);
  std::sort(order.begin(), order.end());

  SelectionSet out;
  out.indices = std::move(order);
  out.tags.assign(out.indices.size(), tag);
  return out;
}

}  // namespace relaykv
