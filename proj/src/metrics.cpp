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

#include "ctvlm/metrics.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace ctvlm {

std::size_t ScoredSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}
std::size_t ScoredSet::negatives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 0));
}

void ScoredSet::check() const {
  if (scores.size() != labels.size())
    throw SchemaError("scores and labels differ in length");
  for (int l : labels)
    if (l != 0 && l != 1) throw SchemaError("labels must be 0 or 1");
  for (double s : scores)
    if (std::isnan(s)) throw SchemaError("NaN score");
}

namespace {

// 1-based midranks of `values`.
std::vector<double> midranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mid;
    i = j + 1;
  }
  return ranks;
}

// Placement values of each positive among negatives and vice versa
// (Sun & Xu's fast DeLong construction).
struct Components {
  double auc = 0.0;
  std::vector<double> v10;  // per positive
  std::vector<double> v01;  // per negative
};

Components structural_components(const ScoredSet& set) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < set.scores.size(); ++i)
    (set.labels[i] == 1 ? pos : neg).push_back(set.scores[i]);
  const double m = static_cast<double>(pos.size()), n = static_cast<double>(neg.size());
  std::vector<double> all(pos);
  all.insert(all.end(), neg.begin(), neg.end());
  auto r_all = midranks(all);
  auto r_pos = midranks(pos);
  auto r_neg = midranks(neg);
  Components c;
  c.v10.resize(pos.size());
  c.v01.resize(neg.size());
  double sum_pos_ranks = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    c.v10[i] = (r_all[i] - r_pos[i]) / n;
    sum_pos_ranks += r_all[i];
  }
  for (std::size_t j = 0; j < neg.size(); ++j) c.v01[j] = 1.0 - (r_all[pos.size() + j] - r_neg[j]) / m;
  c.auc = (sum_pos_ranks - m * (m + 1.0) / 2.0) / (m * n);
  return c;
}

double sample_cov(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  return s / (n - 1.0);
}

void require_both_classes(const ScoredSet& set, std::size_t minimum) {
  set.check();
  if (set.positives() < minimum || set.negatives() < minimum)
    throw UndefinedMetricError("need at least " + std::to_string(minimum) +
                               " positive and negative samples, got " + std::to_string(set.positives()) +
                               "/" + std::to_string(set.negatives()));
}

}  // namespace

double auroc(const ScoredSet& set) {
  require_both_classes(set, 1);
  return structural_components(set).auc;
}

double aupr(const ScoredSet& set) {
  require_both_classes(set, 1);
  const std::size_t n = set.scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
  const double total_pos = static_cast<double>(set.positives());
  double tp = 0, fp = 0, prev_recall = 0, area = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && set.scores[order[j]] == set.scores[order[i]]) {
      (set.labels[order[j]] == 1 ? tp : fp) += 1;
      ++j;
    }
    const double recall = tp / total_pos;
    const double precision = tp / (tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return area;
}

DeLongResult delong_ci(const ScoredSet& set, double level) {
  require_both_classes(set, 2);
  if (!(level > 0.0 && level < 1.0)) throw SchemaError("confidence level must be in (0, 1)");
  auto c = structural_components(set);
  const double m = static_cast<double>(c.v10.size()), n = static_cast<double>(c.v01.size());
  DeLongResult r;
  r.auc = c.auc;
  r.variance = sample_cov(c.v10, c.v10) / m + sample_cov(c.v01, c.v01) / n;
  boost::math::normal_distribution<double> normal;
  const double z = boost::math::quantile(normal, 0.5 + level / 2.0);
  const double half = z * std::sqrt(std::max(r.variance, 0.0));
  r.low = std::clamp(r.auc - half, 0.0, 1.0);
  r.high = std::clamp(r.auc + half, 0.0, 1.0);
  return r;
}

double delong_paired_pvalue(const ScoredSet& a, const ScoredSet& b) {
  if (a.labels != b.labels) throw SchemaError("paired DeLong test needs identical labels");
  require_both_classes(a, 2);
  require_both_classes(b, 2);
  auto ca = structural_components(a);
  auto cb = structural_components(b);
  const double m = static_cast<double>(ca.v10.size()), n = static_cast<double>(ca.v01.size());
  const double var = (sample_cov(ca.v10, ca.v10) + sample_cov(cb.v10, cb.v10) - 2 * sample_cov(ca.v10, cb.v10)) / m +
                     (sample_cov(ca.v01, ca.v01) + sample_cov(cb.v01, cb.v01) - 2 * sample_cov(ca.v01, cb.v01)) / n;
  const double diff = ca.auc - cb.auc;
  if (diff == 0.0) return 1.0;
  if (!(var > 0.0)) return 0.0;
  const double z = std::abs(diff) / std::sqrt(var);
  return std::erfc(z / std::sqrt(2.0));
}

// ---------------------------------------------------------------------------
// Reports

EvalReport build_eval_report(const std::vector<ScoredInstance>& scored, std::string model_name) {
  EvalReport report;
  report.model_name = std::move(model_name);
  std::map<std::pair<std::string, std::string>, std::pair<ScoredSet, TaskCategory>> by_task;
  for (auto& s : scored) {
    auto& [set, category] = by_task[{s.dataset, s.task_key}];
    set.scores.push_back(s.score);
    set.labels.push_back(s.label);
    category = s.category;
  }
  std::map<std::pair<std::string, TaskCategory>, std::vector<const TaskMetrics*>> groups;
  report.tasks.reserve(by_task.size());
  for (auto& [key, entry] : by_task) {
    auto& [set, category] = entry;
    TaskMetrics t;
    t.dataset = key.first;
    t.task_key = key.second;
    t.category = category;
    t.n_pos = set.positives();
    t.n_neg = set.negatives();
    if (t.n_pos == 0 || t.n_neg == 0) {
      report.warnings.push_back(t.dataset + "/" + t.task_key + " has a single class; excluded");
    } else {
      t.auroc = auroc(set);
      t.aupr = aupr(set);
      if (t.n_pos >= 2 && t.n_neg >= 2) {
        auto ci = delong_ci(set);
        t.ci_low = ci.low;
        t.ci_high = ci.high;
      }
    }
    report.tasks.push_back(std::move(t));
  }
  for (auto& t : report.tasks)
    if (t.auroc) groups[{t.dataset, t.category}].push_back(&t);
  for (auto& [key, members] : groups) {
    GroupMean g;
    g.dataset = key.first;
    g.category = key.second;
    g.tasks = members.size();
    for (auto* t : members) {
      g.mean_auroc += *t->auroc;
      g.mean_aupr += *t->aupr;
    }
    g.mean_auroc /= static_cast<double>(members.size());
    g.mean_aupr /= static_cast<double>(members.size());
    report.groups.push_back(g);
  }
  return report;
}

std::string EvalReport::to_json() const {
  using nlohmann::json;
  json j;
  j["model"] = model_name;
  j["tasks"] = json::array();
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  for (auto& t : tasks) {
    j["tasks"].push_back({{"task", t.task_key},
                          {"dataset", t.dataset},
                          {"category", to_string(t.category)},
                          {"n_pos", t.n_pos},
                          {"n_neg", t.n_neg},
                          {"auroc", opt(t.auroc)},
                          {"aupr", opt(t.aupr)},
                          {"ci95", {opt(t.ci_low), opt(t.ci_high)}}});
  }
  j["groups"] = json::array();
  for (auto& g : groups)
    j["groups"].push_back({{"dataset", g.dataset},
                           {"category", to_string(g.category)},
                           {"tasks", g.tasks},
                           {"mean_auroc", g.mean_auroc},
                           {"mean_aupr", g.mean_aupr}});
  j["warnings"] = warnings;
  return j.dump(2);
}

std::string EvalReport::to_table() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  // Datasets with a single category print as one column, as in the usual
  // "CTRATE | INSPECT shared/unique | ..." layout.
  std::map<std::string, int> categories_per_dataset;
  for (auto& g : groups) ++categories_per_dataset[g.dataset];
  std::vector<std::string> headers;
  for (auto& g : groups)
    headers.push_back(categories_per_dataset[g.dataset] > 1
                          ? g.dataset + " " + std::string(to_string(g.category))
                          : g.dataset);
  std::size_t name_w = std::max<std::size_t>(model_name.size(), 5);
  out << std::left << std::setw(static_cast<int>(name_w)) << "model";
  for (auto& h : headers) out << "  " << std::right << std::setw(static_cast<int>(std::max<std::size_t>(h.size(), 6))) << h;
  out << '\n' << std::left << std::setw(static_cast<int>(name_w)) << model_name;
  for (std::size_t i = 0; i < groups.size(); ++i)
    out << "  " << std::right << std::setw(static_cast<int>(std::max<std::size_t>(headers[i].size(), 6)))
        << groups[i].mean_auroc;
  out << "\n\n";

  std::size_t task_w = 4, ds_w = 7;
  for (auto& t : tasks) task_w = std::max(task_w, t.task_key.size()), ds_w = std::max(ds_w, t.dataset.size());
  out << std::left << std::setw(static_cast<int>(ds_w)) << "dataset" << "  " << std::setw(static_cast<int>(task_w))
      << "task" << "  category   n+    n-   auroc   aupr    ci95\n";
  for (auto& t : tasks) {
    out << std::left << std::setw(static_cast<int>(ds_w)) << t.dataset << "  " << std::setw(static_cast<int>(task_w))
        << t.task_key << "  " << std::setw(8) << to_string(t.category) << std::right << std::setw(5) << t.n_pos
        << std::setw(6) << t.n_neg << "  ";
    if (t.auroc) {
      out << *t.auroc << "  " << *t.aupr;
      if (t.ci_low) out << "  [" << *t.ci_low << ", " << *t.ci_high << "]";
    } else {
      out << "   --      --";
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace ctvlm
