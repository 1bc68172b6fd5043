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
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ctvlm/volume.hpp"

namespace ctvlm {

inline constexpr float kHuMin = -1000.0f;
inline constexpr float kHuMax = 1000.0f;
inline constexpr float kAirHu = -1000.0f;

// Physical framing geometry. Extents are (x, y, z) in mm.
struct FrameSpec {
  std::array<double, 3> frame_mm{104, 84, 64};
  std::array<double, 3> crop_mm{96, 80, 64};
  Dims3 input_shape{64, 40, 32};
  double voxel_mm = 1.0;

  // Full-scale geometry divided by 4 in every axis.
  static FrameSpec desk();
  static FrameSpec paper();

  Dims3 frame_voxels() const;
  Dims3 crop_voxels() const;
  void check() const;
};

VolumeGrid clip_hu(VolumeGrid volume);

struct Center2 {
  double x = 0.0;
  double y = 0.0;
};

// Soft-tissue threshold, largest 26-connected component, per-slice convex
// hull fill, then the x-y centre of mass of the filled hulls (in voxels).
// Throws CenteringError when no voxel falls in the soft-tissue window.
Center2 body_center(const VolumeGrid& volume, float lo_hu = -150.0f, float hi_hu = 250.0f);

// Geometric x-y centre, the fallback when body_center fails.
Center2 geometric_center(const VolumeGrid& volume);

struct ZCrop {
  VolumeGrid volume;
  int z_begin = 0;  // inclusive
  int z_end = 0;    // exclusive
  std::optional<std::string> warning;
};

// Keeps slices within margin_mm of the lung's top and bottom slice.
// An empty mask leaves the volume unchanged and sets `warning`.
ZCrop crop_z_to_lung(const VolumeGrid& volume, const VolumeGrid& lung_mask,
                     double margin_mm = 5.0);
VolumeGrid crop_z(const VolumeGrid& volume, int z_begin, int z_end);

enum class Interp { trilinear, nearest };

// Resamples to isotropic frame.voxel_mm voxels and crops/pads about
// `center` (x-y) and the middle slice (z) to frame.frame_mm.
VolumeGrid resample_and_frame(const VolumeGrid& volume, Center2 center, const FrameSpec& frame,
                              Interp interp = Interp::trilinear, float pad = kAirHu);

struct AugmentConfig {
  double max_rotation_deg = 15.0;
  double max_zoom = 0.10;
  double noise_sigma = 20.0;  // HU
  double max_offset = 50.0;   // HU
};

struct AugmentParams {
  double rotation_deg = 0.0;
  double zoom = 1.0;
  double noise_sigma = 0.0;
  double offset = 0.0;
  std::uint64_t noise_seed = 0;
};

AugmentParams sample_augment(std::uint64_t seed, const AugmentConfig& config = {});

// Rotation about z, isotropic zoom about the centre, then (images only)
// Gaussian noise and a global offset.
VolumeGrid apply_augment(const VolumeGrid& volume, const AugmentParams& params,
                         Interp interp = Interp::trilinear, float pad = kAirHu);
VolumeGrid augment(const VolumeGrid& volume, std::uint64_t seed, const AugmentConfig& config = {});

// Centre crop to frame.crop_mm (padding with air when the volume is
// smaller), trilinear resize to frame.input_shape, and HU [-1000, 1000]
// mapped to [-1, 1]. Output spacing reflects the resize.
VolumeGrid finalize_input(const VolumeGrid& volume, const FrameSpec& frame);
// Same geometry with nearest-neighbour sampling and no intensity rescale.
VolumeGrid finalize_mask(const VolumeGrid& mask, const FrameSpec& frame);

// Image plus masks (same grid as the image) after clip, lung z-crop,
// centring and framing.
struct FramedCase {
  VolumeGrid image;
  std::map<std::string, VolumeGrid> masks;
  std::vector<std::string> warnings;
};

FramedCase frame_case(const VolumeGrid& raw_image, const std::map<std::string, VolumeGrid>& masks,
                      const VolumeGrid* lung_mask, const FrameSpec& frame);

}  // namespace ctvlm
