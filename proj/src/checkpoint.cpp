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

#include "ctvlm/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "ctvlm/serialize.hpp"

namespace ctvlm {

namespace {

constexpr std::array<char, 8> kMagic{'C', 'T', 'V', 'L', 'M', 'C', 'K', 'P'};
constexpr int kFormat = 1;

struct RawCheckpoint {
  nlohmann::json header;
  std::vector<float> blob;
};

RawCheckpoint read_raw(const std::filesystem::path& path, bool with_blob) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw SchemaError(path.string() + " is not a checkpoint file");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  if (!in || n > (1u << 30)) throw SchemaError("corrupt checkpoint header in " + path.string());
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw SchemaError("truncated checkpoint header in " + path.string());
  RawCheckpoint raw;
  try {
    raw.header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (raw.header.value("format", 0) != kFormat) throw SchemaError("unsupported checkpoint format");
  if (with_blob) {
    const auto start = in.tellg();
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg() - start);
    in.seekg(start);
    if (bytes % sizeof(float) != 0) throw SchemaError("checkpoint data has a partial float");
    raw.blob.resize(bytes / sizeof(float));
    in.read(reinterpret_cast<char*>(raw.blob.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw SchemaError("truncated checkpoint data in " + path.string());
  }
  return raw;
}

CheckpointInfo info_from(const nlohmann::json& h) {
  CheckpointInfo info;
  try {
    from_json(h.at("config"), info.config);
    info.step = h.at("step").get<int>();
    if (!h.at("val_metric").is_null()) info.val_metric = h["val_metric"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("bad checkpoint header: ") + e.what());
  }
  return info;
}

void fill(const RawCheckpoint& raw, Model<float>& model) {
  auto& params = model.params();
  const auto& tensors = raw.header.at("tensors");
  if (tensors.size() != params.size()) throw SchemaError("checkpoint tensor count does not match the model");
  for (const auto& t : tensors) {
    const auto name = t.at("name").get<std::string>();
    auto* p = params.find(name);
    if (!p) throw SchemaError("checkpoint tensor '" + name + "' is not in the model");
    if (t.at("shape").get<std::vector<int>>() != p->shape)
      throw SchemaError("checkpoint tensor '" + name + "' has a different shape");
    const auto offset = t.at("offset").get<std::size_t>();
    if (offset + p->size() > raw.blob.size()) throw SchemaError("checkpoint tensor '" + name + "' is truncated");
    std::copy_n(raw.blob.begin() + static_cast<std::ptrdiff_t>(offset), p->size(), p->value.begin());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, int step,
                     std::optional<double> val_metric) {
  nlohmann::json header;
  header["format"] = kFormat;
  header["config"] = model.config();
  header["step"] = step;
  header["val_metric"] = val_metric ? nlohmann::json(*val_metric) : nlohmann::json(nullptr);
  auto& tensors = header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    tensors.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}});
    offset += p.size();
  }
  const std::string text = header.dump();
  const std::uint64_t n = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw SchemaError("cannot write checkpoint " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : model.params())
      out.write(reinterpret_cast<const char*>(p.value.data()),
                static_cast<std::streamsize>(p.size() * sizeof(float)));
    if (!out) throw SchemaError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  return info_from(read_raw(path, false).header);
}

Model<float> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info) {
  auto raw = read_raw(path, true);
  auto meta = info_from(raw.header);
  Model<float> model(meta.config);
  fill(raw, model);
  if (info) *info = meta;
  return model;
}

void load_checkpoint_into(const std::filesystem::path& path, Model<float>& model) {
  fill(read_raw(path, true), model);
}

}  // namespace ctvlm
