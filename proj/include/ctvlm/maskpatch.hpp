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
#include <vector>

#include "ctvlm/common.hpp"
#include "ctvlm/volume.hpp"

namespace ctvlm {

// Segmentation target: one row per vision token, u^3 binary entries per row.
// Rows follow the encoder's token order (z slowest, x fastest over the
// (n/d, m/d, s/d) grid); entries within a row follow the same order over
// the u x u x u block.
struct PatchTarget {
  int d = 1;
  int u = 1;
  Dims3 grid;  // token grid = input dims / d
  std::vector<std::uint8_t> values;

  std::size_t rows() const { return grid.count(); }
  std::size_t cols() const { return static_cast<std::size_t>(u) * u * u; }
  std::uint8_t at(std::size_t row, std::size_t col) const { return values[row * cols() + col]; }
};

// Non-overlapping max pool with window d/u. Mask values > 0.5 count as 1.
VolumeGrid max_pool(const VolumeGrid& mask, int window);

// Throws ShapeError if u does not divide d or d does not divide a dimension.
PatchTarget patchify_mask(const VolumeGrid& mask, int d, int u);

// Inverse block partition. Returns a volume of dims grid * u.
VolumeGrid unpack_mask(const PatchTarget& target, Dims3 grid);

// Thresholds row-major (rows x u^3) logits at zero into a PatchTarget.
PatchTarget threshold_logits(const std::vector<float>& logits, Dims3 grid, int d, int u);

}  // namespace ctvlm
