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

#include "ctvlm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace ctvlm {

GradCheckReport grad_check(ParameterStore<double>& params, const std::function<double(bool)>& loss,
                           const std::vector<std::string>& tensors, double eps,
                           std::size_t samples_per_tensor, std::uint64_t seed, double abs_floor) {
  params.zero_grad();
  loss(true);
  std::vector<Parameter<double>*> selected;
  if (tensors.empty()) {
    for (auto& p : params) selected.push_back(&p);
  } else {
    for (auto& name : tensors) selected.push_back(&params.at(name));
  }
  std::mt19937_64 rng(seed);
  GradCheckReport report;
  for (auto* p : selected) {
    std::vector<std::size_t> idx(p->size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > samples_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(samples_per_tensor);
    }
    for (auto i : idx) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = loss(false);
      p->value[i] = saved - eps;
      const double down = loss(false);
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = p->grad[i];
      const double scale = std::max(std::abs(numeric), std::abs(analytic));
      const double err = scale < abs_floor ? std::abs(numeric - analytic)
                                           : std::abs(numeric - analytic) / scale;
      ++report.checked;
      if (report.worst.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = p->name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return report;
}

}  // namespace ctvlm
