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

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include "ctvlm/volume.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "volume and checkpoint formats assume a little-endian host");

namespace ctvlm {

Affine identity_affine() {
  return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

Affine diagonal_affine(const std::array<double, 3>& spacing) {
  Affine a = identity_affine();
  a[0] = spacing[0];
  a[5] = spacing[1];
  a[10] = spacing[2];
  return a;
}

VolumeGrid::VolumeGrid(Dims3 d, std::array<double, 3> sp, float fill)
    : dims(d), spacing(sp), affine(diagonal_affine(sp)), data(d.count(), fill) {}

void VolumeGrid::check() const {
  if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0)
    throw ShapeError("volume dims must be positive, got " + to_string(dims));
  if (data.size() != dims.count())
    throw ShapeError("volume data size " + std::to_string(data.size()) + " does not match dims " +
                     to_string(dims));
  for (double s : spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw SchemaError("voxel spacing must be positive");
}

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

struct GzCloser {
  void operator()(gzFile f) const { gzclose(f); }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

double det3(const Affine& a) {
  return a[0] * (a[5] * a[10] - a[6] * a[9]) - a[1] * (a[4] * a[10] - a[6] * a[8]) +
         a[2] * (a[4] * a[9] - a[5] * a[8]);
}

Affine qform_affine(const Nifti1Header& h) {
  double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
  double a2 = 1.0 - (b * b + c * c + d * d);
  double a = a2 > 0 ? std::sqrt(a2) : 0.0;
  double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
  double dx = h.pixdim[1], dy = h.pixdim[2], dz = h.pixdim[3] * qfac;
  Affine m = identity_affine();
  m[0] = (a * a + b * b - c * c - d * d) * dx;
  m[1] = 2 * (b * c - a * d) * dy;
  m[2] = 2 * (b * d + a * c) * dz;
  m[4] = 2 * (b * c + a * d) * dx;
  m[5] = (a * a + c * c - b * b - d * d) * dy;
  m[6] = 2 * (c * d - a * b) * dz;
  m[8] = 2 * (b * d - a * c) * dx;
  m[9] = 2 * (c * d + a * b) * dy;
  m[10] = (a * a + d * d - c * c - b * b) * dz;
  m[3] = h.qoffset_x;
  m[7] = h.qoffset_y;
  m[11] = h.qoffset_z;
  return m;
}

}  // namespace

VolumeGrid load_volume(const std::filesystem::path& path) {
  const std::string rec = path.string();
  GzHandle f(gzopen(rec.c_str(), "rb"));
  if (!f) throw IngestionError(rec, "cannot open file");
  Nifti1Header h{};
  if (gzread(f.get(), &h, sizeof h) != static_cast<int>(sizeof h))
    throw IngestionError(rec, "truncated NIfTI header");
  if (h.sizeof_hdr != 348) throw IngestionError(rec, "not a little-endian NIfTI-1 file");
  if (std::memcmp(h.magic, "n+1\0", 4) != 0)
    throw IngestionError(rec, "only single-file NIfTI-1 (n+1) is supported");
  int ndim = h.dim[0];
  if (ndim < 3 || ndim > 7) throw IngestionError(rec, "expected a 3D volume");
  for (int i = 4; i <= ndim; ++i)
    if (h.dim[i] > 1) throw IngestionError(rec, "multi-channel or 4D data is not supported");
  if (h.datatype != kDtInt16 && h.datatype != kDtFloat32)
    throw IngestionError(rec, "unsupported datatype " + std::to_string(h.datatype));

  VolumeGrid v;
  v.dims = {h.dim[1], h.dim[2], h.dim[3]};
  if (v.dims.x <= 0 || v.dims.y <= 0 || v.dims.z <= 0) throw IngestionError(rec, "bad dims");
  v.spacing = {h.pixdim[1], h.pixdim[2], h.pixdim[3]};
  for (double s : v.spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw IngestionError(rec, "non-positive voxel spacing");

  if (h.sform_code > 0) {
    v.affine = identity_affine();
    for (int c = 0; c < 4; ++c) {
      v.affine[c] = h.srow_x[c];
      v.affine[4 + c] = h.srow_y[c];
      v.affine[8 + c] = h.srow_z[c];
    }
  } else if (h.qform_code > 0) {
    v.affine = qform_affine(h);
  } else {
    v.affine = diagonal_affine(v.spacing);
  }
  for (double a : v.affine)
    if (!std::isfinite(a)) throw IngestionError(rec, "corrupted affine (non-finite entries)");
  if (std::abs(det3(v.affine)) < 1e-12) throw IngestionError(rec, "corrupted affine (singular)");

  auto offset = static_cast<long>(h.vox_offset);
  if (offset < 348 || gzseek(f.get(), offset, SEEK_SET) != offset)
    throw IngestionError(rec, "bad vox_offset");

  const std::size_t n = v.dims.count();
  v.data.resize(n);
  double slope = (h.scl_slope == 0.0f || !std::isfinite(h.scl_slope)) ? 1.0 : h.scl_slope;
  double inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  auto read_all = [&](void* dst, std::size_t bytes) {
    auto* p = static_cast<char*>(dst);
    while (bytes > 0) {
      unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes, 1u << 30));
      int got = gzread(f.get(), p, chunk);
      if (got <= 0) throw IngestionError(rec, "truncated voxel data");
      p += got;
      bytes -= static_cast<std::size_t>(got);
    }
  };
  if (h.datatype == kDtInt16) {
    std::vector<std::int16_t> raw(n);
    read_all(raw.data(), n * sizeof(std::int16_t));
    for (std::size_t i = 0; i < n; ++i) v.data[i] = static_cast<float>(raw[i] * slope + inter);
  } else {
    read_all(v.data.data(), n * sizeof(float));
    if (slope != 1.0 || inter != 0.0)
      for (auto& x : v.data) x = static_cast<float>(x * slope + inter);
  }
  return v;
}

void write_nifti(const std::filesystem::path& path, const VolumeGrid& volume, NiftiDType dtype) {
  volume.check();
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  h.dim[1] = static_cast<std::int16_t>(volume.dims.x);
  h.dim[2] = static_cast<std::int16_t>(volume.dims.y);
  h.dim[3] = static_cast<std::int16_t>(volume.dims.z);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = dtype == NiftiDType::int16 ? kDtInt16 : kDtFloat32;
  h.bitpix = dtype == NiftiDType::int16 ? 16 : 32;
  h.pixdim[0] = 1.0f;
  for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(volume.spacing[i]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 1;
  for (int c = 0; c < 4; ++c) {
    h.srow_x[c] = static_cast<float>(volume.affine[c]);
    h.srow_y[c] = static_cast<float>(volume.affine[4 + c]);
    h.srow_z[c] = static_cast<float>(volume.affine[8 + c]);
  }
  std::memcpy(h.magic, "n+1\0", 4);

  const bool gz = path.extension() == ".gz";
  std::string bytes(reinterpret_cast<const char*>(&h), sizeof h);
  bytes.append(4, '\0');
  if (dtype == NiftiDType::int16) {
    std::vector<std::int16_t> raw(volume.data.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
      raw[i] = static_cast<std::int16_t>(std::lround(volume.data[i]));
    bytes.append(reinterpret_cast<const char*>(raw.data()), raw.size() * sizeof(std::int16_t));
  } else {
    bytes.append(reinterpret_cast<const char*>(volume.data.data()),
                 volume.data.size() * sizeof(float));
  }
  if (gz) {
    GzHandle f(gzopen(path.string().c_str(), "wb"));
    if (!f || gzwrite(f.get(), bytes.data(), static_cast<unsigned>(bytes.size())) !=
                  static_cast<int>(bytes.size()))
      throw Error("cannot write " + path.string());
  } else {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("cannot write " + path.string());
  }
}

namespace {
std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}
}  // namespace

void write_raw_volume(const std::filesystem::path& stem, const VolumeGrid& volume,
                      const std::map<std::string, std::string>& extra) {
  volume.check();
  nlohmann::json j;
  j["dims"] = {volume.dims.x, volume.dims.y, volume.dims.z};
  j["spacing"] = volume.spacing;
  j["affine"] = volume.affine;
  for (auto& [k, v] : extra) j[k] = v;
  {
    std::ofstream out(with_suffix(stem, ".raw"), std::ios::binary);
    out.write(reinterpret_cast<const char*>(volume.data.data()),
              static_cast<std::streamsize>(volume.data.size() * sizeof(float)));
    if (!out) throw Error("cannot write " + with_suffix(stem, ".raw").string());
  }
  std::ofstream meta(with_suffix(stem, ".json"));
  meta << j.dump(2) << '\n';
  if (!meta) throw Error("cannot write " + with_suffix(stem, ".json").string());
}

VolumeGrid read_raw_volume(const std::filesystem::path& stem) {
  const auto rec = stem.string();
  std::ifstream meta(with_suffix(stem, ".json"));
  if (!meta) throw IngestionError(rec, "missing cache sidecar");
  nlohmann::json j;
  try {
    meta >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(rec, std::string("bad cache sidecar: ") + e.what());
  }
  VolumeGrid v;
  auto d = j.at("dims").get<std::array<int, 3>>();
  v.dims = {d[0], d[1], d[2]};
  v.spacing = j.at("spacing").get<std::array<double, 3>>();
  v.affine = j.contains("affine") ? j["affine"].get<Affine>() : diagonal_affine(v.spacing);
  v.data.resize(v.dims.count());
  std::ifstream in(with_suffix(stem, ".raw"), std::ios::binary);
  in.read(reinterpret_cast<char*>(v.data.data()),
          static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (!in || in.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(float)))
    throw IngestionError(rec, "truncated cache blob");
  return v;
}

}  // namespace ctvlm
