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

#include "ctvlm/volprep.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace ctvlm {

FrameSpec FrameSpec::desk() { return FrameSpec{}; }

FrameSpec FrameSpec::paper() {
  FrameSpec f;
  f.frame_mm = {416, 336, 256};
  f.crop_mm = {384, 320, 256};
  f.input_shape = {256, 160, 128};
  return f;
}

namespace {
int voxels_for(double mm, double voxel_mm) {
  return static_cast<int>(std::lround(mm / voxel_mm));
}
}  // namespace

Dims3 FrameSpec::frame_voxels() const {
  return {voxels_for(frame_mm[0], voxel_mm), voxels_for(frame_mm[1], voxel_mm),
          voxels_for(frame_mm[2], voxel_mm)};
}

Dims3 FrameSpec::crop_voxels() const {
  return {voxels_for(crop_mm[0], voxel_mm), voxels_for(crop_mm[1], voxel_mm),
          voxels_for(crop_mm[2], voxel_mm)};
}

void FrameSpec::check() const {
  if (!(voxel_mm > 0)) throw SchemaError("frame voxel size must be positive");
  for (int i = 0; i < 3; ++i) {
    if (!(frame_mm[i] > 0) || !(crop_mm[i] > 0)) throw SchemaError("frame extents must be positive");
    if (crop_mm[i] > frame_mm[i]) throw SchemaError("crop extents exceed frame extents");
  }
  if (input_shape.x <= 0 || input_shape.y <= 0 || input_shape.z <= 0)
    throw SchemaError("input shape must be positive");
}

VolumeGrid clip_hu(VolumeGrid volume) {
  for (auto& v : volume.data) v = std::clamp(v, kHuMin, kHuMax);
  return volume;
}

// ---------------------------------------------------------------------------
// Centring

namespace {

struct Point {
  long x, y;
};

long cross(const Point& o, const Point& a, const Point& b) {
  return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// Andrew's monotone chain; counter-clockwise, no repeated end point.
std::vector<Point> convex_hull(std::vector<Point> pts) {
  std::sort(pts.begin(), pts.end(),
            [](const Point& a, const Point& b) { return a.x != b.x ? a.x < b.x : a.y < b.y; });
  pts.erase(std::unique(pts.begin(), pts.end(),
                        [](const Point& a, const Point& b) { return a.x == b.x && a.y == b.y; }),
            pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point> hull(2 * pts.size());
  std::size_t k = 0;
  for (const auto& p : pts) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], p) <= 0) --k;
    hull[k++] = p;
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

// Scanline fill of a convex polygon with integer vertices. Calls
// visit(x, y) for every lattice point inside or on the boundary.
template <class Visit>
void fill_convex(const std::vector<Point>& hull, Visit&& visit) {
  if (hull.empty()) return;
  long ymin = hull[0].y, ymax = hull[0].y;
  for (auto& p : hull) ymin = std::min(ymin, p.y), ymax = std::max(ymax, p.y);
  for (long y = ymin; y <= ymax; ++y) {
    double xl = std::numeric_limits<double>::infinity();
    double xr = -xl;
    for (std::size_t i = 0; i < hull.size(); ++i) {
      const Point& a = hull[i];
      const Point& b = hull[(i + 1) % hull.size()];
      if (y < std::min(a.y, b.y) || y > std::max(a.y, b.y)) continue;
      if (a.y == b.y) {
        xl = std::min({xl, double(a.x), double(b.x)});
        xr = std::max({xr, double(a.x), double(b.x)});
      } else {
        double x = a.x + double(b.x - a.x) * double(y - a.y) / double(b.y - a.y);
        xl = std::min(xl, x);
        xr = std::max(xr, x);
      }
    }
    if (xl > xr) continue;
    for (long x = static_cast<long>(std::ceil(xl - 1e-9)); x <= static_cast<long>(std::floor(xr + 1e-9)); ++x)
      visit(x, y);
  }
}

}  // namespace

Center2 body_center(const VolumeGrid& volume, float lo_hu, float hi_hu) {
  volume.check();
  const Dims3 d = volume.dims;
  const std::size_t n = d.count();
  std::vector<std::int32_t> label(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    label[i] = (volume.data[i] >= lo_hu && volume.data[i] <= hi_hu) ? -1 : 0;

  // Component labelling by flood fill, 26-neighbourhood.
  std::int32_t next = 0, best = 0;
  std::size_t best_size = 0;
  std::vector<std::size_t> stack;
  for (std::size_t seed = 0; seed < n; ++seed) {
    if (label[seed] != -1) continue;
    ++next;
    std::size_t size = 0;
    label[seed] = next;
    stack.push_back(seed);
    while (!stack.empty()) {
      std::size_t i = stack.back();
      stack.pop_back();
      ++size;
      int x = static_cast<int>(i % d.x);
      int y = static_cast<int>((i / d.x) % d.y);
      int z = static_cast<int>(i / (static_cast<std::size_t>(d.x) * d.y));
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int nx = x + dx, ny = y + dy, nz = z + dz;
            if (nx < 0 || ny < 0 || nz < 0 || nx >= d.x || ny >= d.y || nz >= d.z) continue;
            std::size_t j = d.index(nx, ny, nz);
            if (label[j] == -1) {
              label[j] = next;
              stack.push_back(j);
            }
          }
    }
    if (size > best_size) best_size = size, best = next;
  }
  if (best_size == 0) throw CenteringError("no voxels in the soft-tissue window");

  double sx = 0, sy = 0, count = 0;
  std::vector<Point> pts;
  for (int z = 0; z < d.z; ++z) {
    pts.clear();
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        if (label[d.index(x, y, z)] == best) pts.push_back({x, y});
    if (pts.empty()) continue;
    fill_convex(convex_hull(pts), [&](long x, long y) {
      sx += double(x);
      sy += double(y);
      count += 1;
    });
  }
  return {sx / count, sy / count};
}

Center2 geometric_center(const VolumeGrid& volume) {
  return {(volume.dims.x - 1) / 2.0, (volume.dims.y - 1) / 2.0};
}

// ---------------------------------------------------------------------------
// z cropping

VolumeGrid crop_z(const VolumeGrid& volume, int z_begin, int z_end) {
  volume.check();
  z_begin = std::max(z_begin, 0);
  z_end = std::min(z_end, volume.dims.z);
  if (z_begin >= z_end) throw ShapeError("empty z range");
  VolumeGrid out;
  out.dims = {volume.dims.x, volume.dims.y, z_end - z_begin};
  out.spacing = volume.spacing;
  out.affine = volume.affine;
  for (int r = 0; r < 3; ++r) out.affine[r * 4 + 3] += volume.affine[r * 4 + 2] * z_begin;
  const std::size_t slice = static_cast<std::size_t>(volume.dims.x) * volume.dims.y;
  out.data.assign(volume.data.begin() + static_cast<std::ptrdiff_t>(slice * z_begin),
                  volume.data.begin() + static_cast<std::ptrdiff_t>(slice * z_end));
  return out;
}

ZCrop crop_z_to_lung(const VolumeGrid& volume, const VolumeGrid& lung_mask, double margin_mm) {
  volume.check();
  if (!(lung_mask.dims == volume.dims))
    throw ShapeError("lung mask dims " + to_string(lung_mask.dims) + " differ from volume " +
                     to_string(volume.dims));
  const Dims3 d = volume.dims;
  const std::size_t slice = static_cast<std::size_t>(d.x) * d.y;
  int top = -1, bottom = -1;
  for (int z = 0; z < d.z; ++z) {
    auto first = lung_mask.data.begin() + static_cast<std::ptrdiff_t>(slice * z);
    if (std::any_of(first, first + static_cast<std::ptrdiff_t>(slice), [](float v) { return v > 0.5f; })) {
      if (bottom < 0) bottom = z;
      top = z;
    }
  }
  if (bottom < 0) return {volume, 0, d.z, "lung mask is empty; z extent left unchanged"};
  int margin = static_cast<int>(std::floor(margin_mm / volume.spacing[2] + 1e-9));
  int z0 = std::max(bottom - margin, 0);
  int z1 = std::min(top + margin + 1, d.z);
  return {crop_z(volume, z0, z1), z0, z1, std::nullopt};
}

// ---------------------------------------------------------------------------
// Sampling

namespace {

// Trilinear sample at continuous voxel coordinates. Points within half a
// voxel of the grid use edge values; beyond that the pad value.
float sample_trilinear(const VolumeGrid& v, double x, double y, double z, float pad) {
  const Dims3 d = v.dims;
  if (x < -0.5 || y < -0.5 || z < -0.5 || x > d.x - 0.5 || y > d.y - 0.5 || z > d.z - 0.5)
    return pad;
  x = std::clamp(x, 0.0, double(d.x - 1));
  y = std::clamp(y, 0.0, double(d.y - 1));
  z = std::clamp(z, 0.0, double(d.z - 1));
  int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
      z0 = static_cast<int>(std::floor(z));
  int x1 = std::min(x0 + 1, d.x - 1), y1 = std::min(y0 + 1, d.y - 1), z1 = std::min(z0 + 1, d.z - 1);
  double fx = x - x0, fy = y - y0, fz = z - z0;
  auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
  double c00 = lerp(v.at(x0, y0, z0), v.at(x1, y0, z0), fx);
  double c10 = lerp(v.at(x0, y1, z0), v.at(x1, y1, z0), fx);
  double c01 = lerp(v.at(x0, y0, z1), v.at(x1, y0, z1), fx);
  double c11 = lerp(v.at(x0, y1, z1), v.at(x1, y1, z1), fx);
  double c0 = lerp(c00, c10, fy);
  double c1 = lerp(c01, c11, fy);
  return static_cast<float>(lerp(c0, c1, fz));
}

float sample_nearest(const VolumeGrid& v, double x, double y, double z, float pad) {
  const Dims3 d = v.dims;
  long ix = std::lround(x), iy = std::lround(y), iz = std::lround(z);
  if (ix < 0 || iy < 0 || iz < 0 || ix >= d.x || iy >= d.y || iz >= d.z) return pad;
  return v.at(static_cast<int>(ix), static_cast<int>(iy), static_cast<int>(iz));
}

float sample(const VolumeGrid& v, double x, double y, double z, Interp interp, float pad) {
  return interp == Interp::trilinear ? sample_trilinear(v, x, y, z, pad)
                                     : sample_nearest(v, x, y, z, pad);
}

}  // namespace

VolumeGrid resample_and_frame(const VolumeGrid& volume, Center2 center, const FrameSpec& frame,
                              Interp interp, float pad) {
  volume.check();
  frame.check();
  const Dims3 out_dims = frame.frame_voxels();
  const double h = frame.voxel_mm;
  VolumeGrid out(out_dims, {h, h, h});
  const double cz = (volume.dims.z - 1) / 2.0;
  const double ox = (out_dims.x - 1) / 2.0, oy = (out_dims.y - 1) / 2.0, oz = (out_dims.z - 1) / 2.0;
  const auto& sp = volume.spacing;
  for (int k = 0; k < out_dims.z; ++k) {
    double z = cz + (k - oz) * h / sp[2];
    for (int j = 0; j < out_dims.y; ++j) {
      double y = center.y + (j - oy) * h / sp[1];
      for (int i = 0; i < out_dims.x; ++i) {
        double x = center.x + (i - ox) * h / sp[0];
        out.at(i, j, k) = sample(volume, x, y, z, interp, pad);
      }
    }
  }
  // Output voxel (0,0,0) sits at input voxel coordinate (center - o*h/sp).
  const double origin_vox[3] = {center.x - ox * h / sp[0], center.y - oy * h / sp[1], cz - oz * h / sp[2]};
  for (int r = 0; r < 3; ++r) {
    double t = volume.affine[r * 4 + 3];
    for (int c = 0; c < 3; ++c) {
      t += volume.affine[r * 4 + c] * origin_vox[c];
      out.affine[r * 4 + c] = volume.affine[r * 4 + c] * h / sp[c];
    }
    out.affine[r * 4 + 3] = t;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentParams sample_augment(std::uint64_t seed, const AugmentConfig& config) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  AugmentParams p;
  p.rotation_deg = unit(rng) * config.max_rotation_deg;
  p.zoom = 1.0 + unit(rng) * config.max_zoom;
  p.noise_sigma = config.noise_sigma;
  p.offset = unit(rng) * config.max_offset;
  p.noise_seed = rng();
  return p;
}

VolumeGrid apply_augment(const VolumeGrid& volume, const AugmentParams& params, Interp interp,
                         float pad) {
  volume.check();
  if (!(params.zoom > 0)) throw SchemaError("zoom must be positive");
  const Dims3 d = volume.dims;
  const auto& sp = volume.spacing;
  const double cx = (d.x - 1) / 2.0, cy = (d.y - 1) / 2.0, cz = (d.z - 1) / 2.0;
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  VolumeGrid out = volume;
  const bool geometric = params.rotation_deg != 0.0 || params.zoom != 1.0;
  if (geometric) {
    for (int k = 0; k < d.z; ++k) {
      double z = cz + (k - cz) / params.zoom;
      for (int j = 0; j < d.y; ++j) {
        double py = (j - cy) * sp[1];
        for (int i = 0; i < d.x; ++i) {
          double px = (i - cx) * sp[0];
          // Inverse map: rotate by -theta, then undo the zoom.
          double qx = (c * px + s * py) / params.zoom;
          double qy = (-s * px + c * py) / params.zoom;
          out.at(i, j, k) = sample(volume, cx + qx / sp[0], cy + qy / sp[1], z, interp, pad);
        }
      }
    }
  }
  if (interp == Interp::trilinear && (params.noise_sigma > 0.0 || params.offset != 0.0)) {
    std::mt19937_64 rng(params.noise_seed);
    std::normal_distribution<double> noise(0.0, params.noise_sigma > 0 ? params.noise_sigma : 1.0);
    for (auto& v : out.data) {
      double n = params.noise_sigma > 0 ? noise(rng) : 0.0;
      v = static_cast<float>(v + n + params.offset);
    }
  }
  return out;
}

VolumeGrid augment(const VolumeGrid& volume, std::uint64_t seed, const AugmentConfig& config) {
  return apply_augment(volume, sample_augment(seed, config));
}

// ---------------------------------------------------------------------------
// Final resize

namespace {

VolumeGrid crop_and_resize(const VolumeGrid& volume, const FrameSpec& frame, Interp interp, float pad) {
  volume.check();
  frame.check();
  const Dims3 crop = frame.crop_voxels();
  const Dims3 out_dims = frame.input_shape;
  const Dims3 d = volume.dims;
  // Window start (may be negative when the volume is smaller than the crop).
  const double start[3] = {std::floor((d.x - crop.x) / 2.0), std::floor((d.y - crop.y) / 2.0),
                           std::floor((d.z - crop.z) / 2.0)};
  const double scale[3] = {double(crop.x) / out_dims.x, double(crop.y) / out_dims.y,
                           double(crop.z) / out_dims.z};
  VolumeGrid out(out_dims, {volume.spacing[0] * scale[0], volume.spacing[1] * scale[1],
                            volume.spacing[2] * scale[2]});
  auto src = [&](int axis, int i, int extent) {
    double local = (i + 0.5) * scale[axis] - 0.5;
    if (interp == Interp::nearest) local = std::floor((i + 0.5) * scale[axis]);
    local = std::clamp(local, 0.0, double(extent - 1));
    return start[axis] + local;
  };
  for (int k = 0; k < out_dims.z; ++k) {
    double z = src(2, k, crop.z);
    for (int j = 0; j < out_dims.y; ++j) {
      double y = src(1, j, crop.y);
      for (int i = 0; i < out_dims.x; ++i) {
        double x = src(0, i, crop.x);
        out.at(i, j, k) = sample(volume, x, y, z, interp, pad);
      }
    }
  }
  for (int r = 0; r < 3; ++r) {
    double t = volume.affine[r * 4 + 3];
    for (int c = 0; c < 3; ++c) {
      t += volume.affine[r * 4 + c] * (start[c] + 0.5 * scale[c] - 0.5);
      out.affine[r * 4 + c] = volume.affine[r * 4 + c] * scale[c];
    }
    out.affine[r * 4 + 3] = t;
  }
  return out;
}

}  // namespace

VolumeGrid finalize_input(const VolumeGrid& volume, const FrameSpec& frame) {
  VolumeGrid out = crop_and_resize(volume, frame, Interp::trilinear, kAirHu);
  for (auto& v : out.data) v /= 1000.0f;
  return out;
}

VolumeGrid finalize_mask(const VolumeGrid& mask, const FrameSpec& frame) {
  VolumeGrid out = crop_and_resize(mask, frame, Interp::nearest, 0.0f);
  for (auto& v : out.data) v = v > 0.5f ? 1.0f : 0.0f;
  return out;
}

FramedCase frame_case(const VolumeGrid& raw_image, const std::map<std::string, VolumeGrid>& masks,
                      const VolumeGrid* lung_mask, const FrameSpec& frame) {
  FramedCase out;
  VolumeGrid image = clip_hu(raw_image);
  for (auto& [key, m] : masks)
    if (!(m.dims == image.dims))
      throw ShapeError("mask '" + key + "' dims " + to_string(m.dims) + " differ from image " +
                       to_string(image.dims));
  int z0 = 0, z1 = image.dims.z;
  if (lung_mask) {
    auto crop = crop_z_to_lung(image, *lung_mask, 5.0);
    if (crop.warning) out.warnings.push_back(*crop.warning);
    image = std::move(crop.volume);
    z0 = crop.z_begin;
    z1 = crop.z_end;
  } else {
    out.warnings.push_back("no lung mask; z extent left unchanged");
  }
  Center2 center;
  try {
    center = body_center(image);
  } catch (const CenteringError& e) {
    out.warnings.push_back(std::string(e.what()) + "; using geometric centre");
    center = geometric_center(image);
  }
  out.image = resample_and_frame(image, center, frame, Interp::trilinear, kAirHu);
  for (auto& [key, m] : masks) {
    VolumeGrid cropped = (z0 == 0 && z1 == m.dims.z) ? m : crop_z(m, z0, z1);
    out.masks.emplace(key, resample_and_frame(cropped, center, frame, Interp::nearest, 0.0f));
  }
  return out;
}

}  // namespace ctvlm
