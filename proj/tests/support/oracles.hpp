// Copyright 2026 The ctvlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Independent reference computations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ctvlm/metrics.hpp"

namespace ctvlm::testing {

// Pair counting over all positive/negative pairs, ties 1/2.
inline double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (y[i] == 1)
      for (std::size_t j = 0; j < s.size(); ++j)
        if (y[j] == 0) {
          ++pairs;
          wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
  return wins / static_cast<double>(pairs);
}

// Average precision by enumerating every distinct score as a threshold.
inline double brute_aupr(const std::vector<double>& s, const std::vector<int>& y) {
  std::vector<double> thresholds = s;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double P = 0;
  for (int v : y) P += v;
  double prev_recall = 0.0, ap = 0.0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    const double recall = tp / P;
    ap += (recall - prev_recall) * tp / (tp + fp);
    prev_recall = recall;
  }
  return ap;
}

// Stratified bootstrap variance of the AUROC.
inline double bootstrap_auc_variance(const ScoredSet& set, int replicates, std::uint64_t seed) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < set.scores.size(); ++i) (set.labels[i] ? pos : neg).push_back(set.scores[i]);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_p(0, pos.size() - 1), pick_n(0, neg.size() - 1);
  double sum = 0.0, sq = 0.0;
  for (int r = 0; r < replicates; ++r) {
    ScoredSet b;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      b.scores.push_back(pos[pick_p(rng)]);
      b.labels.push_back(1);
    }
    for (std::size_t i = 0; i < neg.size(); ++i) {
      b.scores.push_back(neg[pick_n(rng)]);
      b.labels.push_back(0);
    }
    const double a = auroc(b);
    sum += a;
    sq += a * a;
  }
  const double mean = sum / replicates;
  return (sq - replicates * mean * mean) / (replicates - 1);
}

// Paired permutation test: each case's two scores are swapped with
// probability 1/2; the p-value is the share of |AUC_a - AUC_b| at least as
// large as observed (the observed arrangement included).
inline double permutation_pvalue(const ScoredSet& a, const ScoredSet& b, int permutations, std::uint64_t seed) {
  const double observed = std::abs(auroc(a) - auroc(b));
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5);
  int extreme = 1;
  ScoredSet pa = a, pb = b;
  for (int p = 0; p < permutations; ++p) {
    for (std::size_t i = 0; i < a.scores.size(); ++i) {
      const bool swap = coin(rng);
      pa.scores[i] = swap ? b.scores[i] : a.scores[i];
      pb.scores[i] = swap ? a.scores[i] : b.scores[i];
    }
    if (std::abs(auroc(pa) - auroc(pb)) >= observed - 1e-12) ++extreme;
  }
  return static_cast<double>(extreme) / (permutations + 1);
}

}  // namespace ctvlm::testing
