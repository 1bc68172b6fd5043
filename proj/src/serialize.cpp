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

#include "ctvlm/serialize.hpp"

namespace ctvlm {

namespace {

template <class V>
void take(const nlohmann::json& j, const char* key, V& out) {
  if (auto it = j.find(key); it != j.end()) out = it->template get<V>();
}

void require_object(const nlohmann::json& j, const char* what) {
  if (!j.is_object()) throw SchemaError(std::string(what) + " must be a JSON object");
}

}  // namespace

void to_json(nlohmann::json& j, const Dims3& d) { j = nlohmann::json::array({d.x, d.y, d.z}); }

void from_json(const nlohmann::json& j, Dims3& d) {
  if (!j.is_array() || j.size() != 3) throw SchemaError("shape must be an array of three integers");
  d = Dims3{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"input_shape", c.input_shape},
       {"downsample", c.downsample},
       {"intermediate", c.intermediate},
       {"encoder_channels", c.encoder_channels},
       {"kernel_size", c.kernel_size},
       {"hidden", c.hidden},
       {"layers", c.layers},
       {"heads", c.heads},
       {"ffn_multiplier", c.ffn_multiplier},
       {"max_text_length", c.max_text_length},
       {"vocab_size", c.vocab_size},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  require_object(j, "model config");
  take(j, "input_shape", c.input_shape);
  take(j, "downsample", c.downsample);
  take(j, "intermediate", c.intermediate);
  take(j, "encoder_channels", c.encoder_channels);
  take(j, "kernel_size", c.kernel_size);
  take(j, "hidden", c.hidden);
  take(j, "layers", c.layers);
  take(j, "heads", c.heads);
  take(j, "ffn_multiplier", c.ffn_multiplier);
  take(j, "max_text_length", c.max_text_length);
  take(j, "vocab_size", c.vocab_size);
  take(j, "seed", c.seed);
}

void to_json(nlohmann::json& j, const FrameSpec& f) {
  j = {{"frame_mm", f.frame_mm}, {"crop_mm", f.crop_mm}, {"input_shape", f.input_shape}, {"voxel_mm", f.voxel_mm}};
}

void from_json(const nlohmann::json& j, FrameSpec& f) {
  require_object(j, "frame config");
  take(j, "frame_mm", f.frame_mm);
  take(j, "crop_mm", f.crop_mm);
  take(j, "input_shape", f.input_shape);
  take(j, "voxel_mm", f.voxel_mm);
}

void to_json(nlohmann::json& j, const AugmentConfig& a) {
  j = {{"max_rotation_deg", a.max_rotation_deg},
       {"max_zoom", a.max_zoom},
       {"noise_sigma", a.noise_sigma},
       {"max_offset", a.max_offset}};
}

void from_json(const nlohmann::json& j, AugmentConfig& a) {
  require_object(j, "augmentation config");
  take(j, "max_rotation_deg", a.max_rotation_deg);
  take(j, "max_zoom", a.max_zoom);
  take(j, "noise_sigma", a.noise_sigma);
  take(j, "max_offset", a.max_offset);
}

void to_json(nlohmann::json& j, const FocalParams& f) {
  j = {{"alpha", f.alpha ? nlohmann::json(*f.alpha) : nlohmann::json(nullptr)},
       {"gamma", f.gamma},
       {"scale", f.scale}};
}

void from_json(const nlohmann::json& j, FocalParams& f) {
  require_object(j, "focal config");
  if (auto it = j.find("alpha"); it != j.end())
    f.alpha = it->is_null() ? std::nullopt : std::optional<double>(it->get<double>());
  take(j, "gamma", f.gamma);
  take(j, "scale", f.scale);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"total_steps", c.total_steps},
       {"batch_size", c.batch_size},
       {"base_lr", c.base_lr},
       {"warmup_steps", c.warmup_steps},
       {"weight_decay", c.weight_decay},
       {"val_interval", c.val_interval},
       {"seed", c.seed},
       {"augment", c.augment},
       {"clip_grad_norm", c.clip_grad_norm ? nlohmann::json(*c.clip_grad_norm) : nlohmann::json(nullptr)},
       {"focal", c.focal},
       {"augmentation", c.augmentation}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  require_object(j, "train config");
  take(j, "total_steps", c.total_steps);
  take(j, "batch_size", c.batch_size);
  take(j, "base_lr", c.base_lr);
  take(j, "warmup_steps", c.warmup_steps);
  take(j, "weight_decay", c.weight_decay);
  take(j, "val_interval", c.val_interval);
  take(j, "seed", c.seed);
  take(j, "augment", c.augment);
  if (auto it = j.find("clip_grad_norm"); it != j.end())
    c.clip_grad_norm = it->is_null() ? std::nullopt : std::optional<double>(it->get<double>());
  if (auto it = j.find("focal"); it != j.end()) from_json(*it, c.focal);
  if (auto it = j.find("augmentation"); it != j.end()) from_json(*it, c.augmentation);
}

}  // namespace ctvlm
