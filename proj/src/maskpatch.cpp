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

#include "ctvlm/maskpatch.hpp"

#include <string>

namespace ctvlm {

namespace {
void check_factors(int d, int u) {
  if (d <= 0 || u <= 0 || d % u != 0)
    throw ShapeError("intermediate factor u=" + std::to_string(u) +
                     " must divide downsample factor d=" + std::to_string(d));
}
}  // namespace

VolumeGrid max_pool(const VolumeGrid& mask, int window) {
  mask.check();
  const Dims3 in = mask.dims;
  if (window <= 0 || in.x % window || in.y % window || in.z % window)
    throw ShapeError("pool window " + std::to_string(window) + " does not divide " + to_string(in));
  VolumeGrid out({in.x / window, in.y / window, in.z / window},
                 {mask.spacing[0] * window, mask.spacing[1] * window, mask.spacing[2] * window});
  for (int z = 0; z < in.z; ++z)
    for (int y = 0; y < in.y; ++y)
      for (int x = 0; x < in.x; ++x)
        if (mask.at(x, y, z) > 0.5f) out.at(x / window, y / window, z / window) = 1.0f;
  return out;
}

PatchTarget patchify_mask(const VolumeGrid& mask, int d, int u) {
  check_factors(d, u);
  const Dims3 in = mask.dims;
  if (in.x % d || in.y % d || in.z % d)
    throw ShapeError("mask dims " + to_string(in) + " not divisible by d=" + std::to_string(d));
  VolumeGrid pooled = max_pool(mask, d / u);
  PatchTarget t;
  t.d = d;
  t.u = u;
  t.grid = {in.x / d, in.y / d, in.z / d};
  t.values.assign(t.rows() * t.cols(), 0);
  std::size_t row = 0;
  for (int bz = 0; bz < t.grid.z; ++bz)
    for (int by = 0; by < t.grid.y; ++by)
      for (int bx = 0; bx < t.grid.x; ++bx, ++row) {
        std::size_t col = 0;
        for (int z = 0; z < u; ++z)
          for (int y = 0; y < u; ++y)
            for (int x = 0; x < u; ++x, ++col)
              t.values[row * t.cols() + col] =
                  pooled.at(bx * u + x, by * u + y, bz * u + z) > 0.5f ? 1 : 0;
      }
  return t;
}

VolumeGrid unpack_mask(const PatchTarget& target, Dims3 grid) {
  check_factors(target.d, target.u);
  if (!(grid == target.grid) || target.values.size() != target.rows() * target.cols())
    throw ShapeError("patch target of " + std::to_string(target.rows()) + " rows does not match grid " +
                     to_string(grid));
  const int u = target.u;
  const double sp = static_cast<double>(target.d) / u;
  VolumeGrid out({grid.x * u, grid.y * u, grid.z * u}, {sp, sp, sp});
  std::size_t row = 0;
  for (int bz = 0; bz < grid.z; ++bz)
    for (int by = 0; by < grid.y; ++by)
      for (int bx = 0; bx < grid.x; ++bx, ++row) {
        std::size_t col = 0;
        for (int z = 0; z < u; ++z)
          for (int y = 0; y < u; ++y)
            for (int x = 0; x < u; ++x, ++col)
              out.at(bx * u + x, by * u + y, bz * u + z) = target.at(row, col);
      }
  return out;
}

PatchTarget threshold_logits(const std::vector<float>& logits, Dims3 grid, int d, int u) {
  check_factors(d, u);
  PatchTarget t;
  t.d = d;
  t.u = u;
  t.grid = grid;
  if (logits.size() != t.rows() * t.cols())
    throw ShapeError("expected " + std::to_string(t.rows() * t.cols()) + " logits, got " +
                     std::to_string(logits.size()));
  t.values.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) t.values[i] = logits[i] > 0.0f ? 1 : 0;
  return t;
}

}  // namespace ctvlm
