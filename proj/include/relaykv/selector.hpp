// Copyright (C) 2026 relaykv authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

namespace relaykv {

// Runtime token selection: mean-relative deviation and influence criteria
// plus a trailing-window set, unioned into the final rectification set.
struct SelectionThresholds {
  double tau_dev = 1.5;
  double tau_inf = 1.45;
  std::size_t suffix_k = 10;

  void validate() const;  // tau_dev > 0, tau_inf > 0
};

enum SelectionTag : unsigned {
  kSelDeviation = 1u << 0,
  kSelInfluenceScore = 1u << 1,
  kSelInfluenceSuffix = 1u << 2,
  kSelBlendTopK = 1u << 3,
};

// Sorted unique segment indices with per-index provenance bits.
struct SelectionSet {
  std::vector<std::size_t> indices;
  std::vector<unsigned> tags;  // parallel to indices

  std::size_t size() const { return indices.size(); }
  bool contains(std::size_t idx) const;
  std::size_t count_tag(unsigned tag) const;
};

// Indices with score >= tau * mean(score). Thresholds are inclusive. An
// all-zero score vector selects nothing: a zero mean carries no evidence,
// and bit-equal caches must relay as pure reuse.
SelectionSet select_deviation(std::span<const double> s_dev, double tau_dev);
SelectionSet select_influence(std::span<const double> s_inf, double tau_inf);

// The last k positions of a length-n segment (clamped at 0).
SelectionSet suffix_set(std::size_t n, std::size_t suffix_k);

// Union with provenance bits merged.
SelectionSet final_selection(const SelectionSet& dev, const SelectionSet& inf_score,
                             const SelectionSet& suffix);

// Top-count indices by score, descending, index-ascending on ties.
SelectionSet top_k_by_score(std::span<const double> scores, std::size_t count, unsigned tag);

}  // namespace relaykv
