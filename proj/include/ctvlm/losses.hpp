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

#include <optional>
#include <span>
#include <vector>

#include "ctvlm/maskpatch.hpp"

namespace ctvlm {

template <class T>
T sigmoid(T x);

// max(x, 0) - x*y + log(1 + exp(-|x|)).
template <class T>
T bce_with_logits(T logit, int y);
// d/d(logit) of bce_with_logits: sigmoid(logit) - y.
template <class T>
T bce_with_logits_grad(T logit, int y);

struct FocalParams {
  // Weight on positives; negatives get 1 - alpha. nullopt disables weighting.
  std::optional<double> alpha = 0.25;
  double gamma = 2.0;
  double scale = 10.0;
};

// scale * mean over entries of -alpha_t (1 - p_t)^gamma log(p_t).
// When `grad` is given it receives d(loss)/d(logit) per entry.
template <class T>
T focal_loss(std::span<const T> logits, const PatchTarget& target, const FocalParams& params = {},
             std::vector<T>* grad = nullptr);

enum class TargetKind { classification, segmentation };

struct BatchItemTarget {
  TargetKind kind = TargetKind::classification;
  std::optional<int> y;
  std::optional<PatchTarget> patch_target;

  static BatchItemTarget classification(int label);
  static BatchItemTarget segmentation(PatchTarget target);
  // Throws SchemaError when the populated fields do not match `kind`.
  void check() const;
};

template <class T>
struct ItemOutputs {
  T cls_logit = T(0);
  std::span<const T> seg_logits;
};

template <class T>
struct BatchLoss {
  T loss = T(0);             // mean over items
  std::vector<T> per_item;   // unscaled by batch size
  std::vector<T> d_cls;      // d(loss)/d(cls_logit) per item, 0 for segmentation items
  std::vector<std::vector<T>> d_seg;  // empty for classification items
};

// Each item contributes through exactly one head: BCE on the classification
// logit or scaled focal loss on the segmentation logits.
template <class T>
BatchLoss<T> batch_loss(std::span<const ItemOutputs<T>> outputs, std::span<const BatchItemTarget> targets,
                        const FocalParams& focal = {});

}  // namespace ctvlm
