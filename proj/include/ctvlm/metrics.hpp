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

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctvlm/common.hpp"
#include "ctvlm/taskbank.hpp"

namespace ctvlm {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;

  std::size_t positives() const;
  std::size_t negatives() const;
  // Equal lengths and labels in {0, 1}. Throws SchemaError.
  void check() const;
};

// Mann-Whitney statistic with ties counted 1/2, via midranks.
// Throws UndefinedMetricError when either class is absent.
double auroc(const ScoredSet& set);

// Average precision over a descending-score sweep with tied scores grouped.
double aupr(const ScoredSet& set);

struct DeLongResult {
  double auc = 0.0;
  double variance = 0.0;
  double low = 0.0;
  double high = 0.0;
};

// Structural-components variance and a normal-approximation CI clamped to
// [0, 1]. Requires at least two samples per class.
DeLongResult delong_ci(const ScoredSet& set, double level = 0.95);

// Two-sided p-value for AUC(a) == AUC(b) on the same cases.
// Throws SchemaError when labels differ.
double delong_paired_pvalue(const ScoredSet& a, const ScoredSet& b);

struct TaskMetrics {
  std::string task_key;
  std::string dataset;
  TaskCategory category = TaskCategory::shared;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  // Absent when the split holds a single class for this task.
  std::optional<double> auroc;
  std::optional<double> aupr;
  std::optional<double> ci_low;
  std::optional<double> ci_high;
};

struct GroupMean {
  std::string dataset;
  TaskCategory category = TaskCategory::shared;
  std::size_t tasks = 0;
  double mean_auroc = 0.0;
  double mean_aupr = 0.0;
};

struct EvalReport {
  std::string model_name;
  std::vector<TaskMetrics> tasks;
  std::vector<GroupMean> groups;
  std::vector<std::string> warnings;

  std::string to_json() const;
  // One row per model with a column per dataset/category group, then the
  // per-task rows.
  std::string to_table() const;
};

struct ScoredInstance {
  std::string task_key;
  std::string dataset;
  TaskCategory category = TaskCategory::shared;
  int label = 0;
  double score = 0.0;
};

// Groups by (dataset, task), computes per-task metrics and unweighted
// (dataset, category) means over tasks that have both classes.
EvalReport build_eval_report(const std::vector<ScoredInstance>& scored, std::string model_name = "model");

}  // namespace ctvlm
