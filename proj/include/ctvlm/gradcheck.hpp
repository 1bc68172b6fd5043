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

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctvlm/params.hpp"

namespace ctvlm {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<tensor>[<index>]"
};

// Compares analytic gradients with central differences.
//
// `loss` evaluates the scalar loss at the current parameter values; when its
// argument is true it must also leave the analytic gradient in the store's
// grad buffers (the harness zeroes them first). Up to `samples_per_tensor`
// coordinates are drawn per selected tensor (all of them if the tensor is
// smaller). Relative error is |a - n| / max(|a|, |n|); coordinates where both
// magnitudes are below `abs_floor` contribute |a - n| instead.
GradCheckReport grad_check(ParameterStore<double>& params, const std::function<double(bool)>& loss,
                           const std::vector<std::string>& tensors = {}, double eps = 1e-4,
                           std::size_t samples_per_tensor = 6, std::uint64_t seed = 0,
                           double abs_floor = 1e-9);

}  // namespace ctvlm
