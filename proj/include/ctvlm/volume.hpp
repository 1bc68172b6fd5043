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

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ctvlm/common.hpp"

namespace ctvlm {

using Affine = std::array<double, 16>;  // row-major 4x4, voxel -> mm

Affine identity_affine();
Affine diagonal_affine(const std::array<double, 3>& spacing);

// A 3D scalar field. Values are HU for images and {0, 1} for masks.
struct VolumeGrid {
  Dims3 dims;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Affine affine = identity_affine();
  std::vector<float> data;

  VolumeGrid() = default;
  VolumeGrid(Dims3 d, std::array<double, 3> sp, float fill = 0.0f);

  float& at(int x, int y, int z) { return data[dims.index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[dims.index(x, y, z)]; }
  // Throws ShapeError / SchemaError on inconsistent size or bad spacing.
  void check() const;
};

enum class NiftiDType { int16, float32 };

// Single-file NIfTI-1 (.nii or .nii.gz), little-endian, int16 or float32,
// one channel. scl_slope/scl_inter are applied. The affine comes from the
// sform when set, else the qform, else the pixdim diagonal.
// Throws IngestionError (record = path) for multi-channel data, an unsupported
// dtype, or a non-invertible affine.
VolumeGrid load_volume(const std::filesystem::path& path);

void write_nifti(const std::filesystem::path& path, const VolumeGrid& volume,
                 NiftiDType dtype = NiftiDType::float32);

// Cache format: <stem>.raw (little-endian float32, x fastest) and
// <stem>.json {dims, spacing, affine, ...extra}.
void write_raw_volume(const std::filesystem::path& stem, const VolumeGrid& volume,
                      const std::map<std::string, std::string>& extra = {});
VolumeGrid read_raw_volume(const std::filesystem::path& stem);

}  // namespace ctvlm
