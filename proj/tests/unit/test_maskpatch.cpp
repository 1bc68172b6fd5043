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

#include <random>

#include "ctvlm/maskpatch.hpp"
#include "doctest.h"

using namespace ctvlm;

namespace {

VolumeGrid random_mask(Dims3 dims, double p, std::mt19937_64& rng) {
  VolumeGrid m(dims, {1, 1, 1});
  std::bernoulli_distribution b(p);
  for (auto& v : m.data) v = b(rng) ? 1.0f : 0.0f;
  return m;
}

// Brute force: a pooled cell is 1 iff any voxel of its w^3 window is set.
VolumeGrid brute_pool(const VolumeGrid& m, int w) {
  Dims3 od{m.dims.x / w, m.dims.y / w, m.dims.z / w};
  VolumeGrid out(od, {1, 1, 1});
  for (int z = 0; z < m.dims.z; ++z)
    for (int y = 0; y < m.dims.y; ++y)
      for (int x = 0; x < m.dims.x; ++x)
        if (m.at(x, y, z) > 0.5f) out.at(x / w, y / w, z / w) = 1.0f;
  return out;
}

}  // namespace

TEST_CASE("single voxel lands in the expected row and column") {
  const int d = 8, u = 4;
  Dims3 dims{32, 16, 24};
  VolumeGrid m(dims, {1, 1, 1});
  const int x = 21, y = 6, z = 17;
  m.at(x, y, z) = 1.0f;
  auto t = patchify_mask(m, d, u);
  CHECK(t.rows() == 4u * 2u * 3u);
  CHECK(t.cols() == 64u);
  // Token (21/8, 6/8, 17/8) = (2, 0, 2); pooled cell (21%8/2, 6%8/2, 17%8/2) = (2, 3, 0).
  const std::size_t row = (2 * 2 + 0) * 4 + 2;
  const std::size_t col = (0 * 4 + 3) * 4 + 2;
  std::size_t ones = 0;
  for (auto v : t.values) ones += v;
  CHECK(ones == 1u);
  CHECK(t.at(row, col) == 1);
}

TEST_CASE("unpack inverts patchify against a brute-force max pool") {
  std::mt19937_64 rng(2024);
  const std::pair<int, int> configs[] = {{4, 2}, {4, 4}, {8, 4}};
  for (int trial = 0; trial < 60; ++trial) {
    for (auto [d, u] : configs) {
      std::uniform_int_distribution<int> side(1, 16 / d);
      Dims3 dims{side(rng) * d, side(rng) * d, side(rng) * d};
      auto m = random_mask(dims, trial % 3 == 0 ? 0.02 : 0.3, rng);
      auto t = patchify_mask(m, d, u);
      REQUIRE(t.values.size() == t.rows() * t.cols());
      CHECK(t.rows() == dims.count() / static_cast<std::size_t>(d * d * d));
      auto back = unpack_mask(t, t.grid);
      auto ref = brute_pool(m, d / u);
      REQUIRE(back.dims == ref.dims);
      CHECK(back.data == ref.data);
      CHECK(max_pool(m, d / u).data == ref.data);
    }
  }
}

TEST_CASE("patchify rejects shapes it cannot partition") {
  VolumeGrid m(Dims3{12, 8, 8}, {1, 1, 1});
  CHECK_THROWS_AS(patchify_mask(m, 8, 4), ShapeError);
  VolumeGrid ok(Dims3{8, 8, 8}, {1, 1, 1});
  CHECK_THROWS_AS(patchify_mask(ok, 8, 3), ShapeError);
  CHECK_THROWS_AS(patchify_mask(ok, 0, 1), ShapeError);
}

TEST_CASE("threshold_logits marks positive logits") {
  Dims3 grid{2, 1, 1};
  std::vector<float> logits(2 * 8, -1.0f);
  logits[3] = 0.5f;
  logits[8 + 7] = 2.0f;
  logits[9] = 0.0f;
  auto t = threshold_logits(logits, grid, 4, 2);
  CHECK(t.at(0, 3) == 1);
  CHECK(t.at(1, 7) == 1);
  CHECK(t.at(1, 1) == 0);
  std::size_t ones = 0;
  for (auto v : t.values) ones += v;
  CHECK(ones == 2u);
  CHECK_THROWS_AS(threshold_logits(std::vector<float>(5), grid, 4, 2), ShapeError);
}
