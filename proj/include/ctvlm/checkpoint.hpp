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

// Checkpoint file layout:
//   8 bytes   magic "CTVLMCKP"
//   8 bytes   header length N, little-endian u64
//   N bytes   JSON header {format, tensors: [{name, shape, offset}], config, step, val_metric}
//   rest      float32 little-endian tensor data; offsets count floats from here

#include <filesystem>
#include <optional>

#include "ctvlm/model.hpp"

namespace ctvlm {

struct CheckpointInfo {
  ModelConfig config;
  int step = 0;
  std::optional<double> val_metric;
};

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, int step,
                     std::optional<double> val_metric);

// Reads the header only.
CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

// Builds a model from the stored config and fills every tensor. Throws
// SchemaError on a malformed file or when tensor names/shapes disagree with
// the config.
Model<float> load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

// Fills an existing model; its config must produce the same tensor layout.
void load_checkpoint_into(const std::filesystem::path& path, Model<float>& model);

}  // namespace ctvlm
