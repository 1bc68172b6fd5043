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

// JSON conversions for the configuration types. Missing keys keep the
// value already present in the target, so a preset can be loaded first and
// then overridden field by field.

#include "json.hpp"

#include "ctvlm/common.hpp"
#include "ctvlm/losses.hpp"
#include "ctvlm/model.hpp"
#include "ctvlm/trainer.hpp"
#include "ctvlm/volprep.hpp"

namespace ctvlm {

void to_json(nlohmann::json& j, const Dims3& d);
void from_json(const nlohmann::json& j, Dims3& d);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const FrameSpec& f);
void from_json(const nlohmann::json& j, FrameSpec& f);
void to_json(nlohmann::json& j, const AugmentConfig& a);
void from_json(const nlohmann::json& j, AugmentConfig& a);
void to_json(nlohmann::json& j, const FocalParams& f);
void from_json(const nlohmann::json& j, FocalParams& f);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace ctvlm
