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

#include "ctvlm/losses.hpp"

#include <cmath>
#include <string>

namespace ctvlm {

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  T e = std::exp(x);
  return e / (T(1) + e);
}

namespace {
// log(sigmoid(z)) = -softplus(-z)
template <class T>
T log_sigmoid(T z) {
  return -(std::max(-z, T(0)) + std::log1p(std::exp(-std::abs(z))));
}
}  // namespace

template <class T>
T bce_with_logits(T logit, int y) {
  return std::max(logit, T(0)) - logit * T(y) + std::log1p(std::exp(-std::abs(logit)));
}

template <class T>
T bce_with_logits_grad(T logit, int y) {
  return sigmoid(logit) - T(y);
}

template <class T>
T focal_loss(std::span<const T> logits, const PatchTarget& target, const FocalParams& params,
             std::vector<T>* grad) {
  const std::size_t n = target.values.size();
  if (logits.size() != n)
    throw ShapeError("focal loss: " + std::to_string(logits.size()) + " logits for a target of " +
                     std::to_string(n) + " entries");
  if (n == 0) throw ShapeError("focal loss: empty target");
  const double gamma = params.gamma;
  const double coeff = params.scale / static_cast<double>(n);
  if (grad) grad->assign(n, T(0));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = target.values[i] != 0;
    const double x = static_cast<double>(logits[i]);
    const double z = pos ? x : -x;  // p_t = sigmoid(z)
    const double alpha_t = params.alpha ? (pos ? *params.alpha : 1.0 - *params.alpha) : 1.0;
    const double log_pt = log_sigmoid(z);
    const double one_minus_pt = sigmoid(-z);
    const double modulation = gamma == 0.0 ? 1.0 : std::pow(one_minus_pt, gamma);
    total += -alpha_t * modulation * log_pt;
    if (grad) {
      const double pt = sigmoid(z);
      const double dz = alpha_t * modulation * (gamma * pt * log_pt - one_minus_pt);
      (*grad)[i] = static_cast<T>(coeff * (pos ? dz : -dz));
    }
  }
  return static_cast<T>(coeff * total);
}

BatchItemTarget BatchItemTarget::classification(int label) {
  BatchItemTarget t;
  t.kind = TargetKind::classification;
  t.y = label;
  t.check();
  return t;
}

BatchItemTarget BatchItemTarget::segmentation(PatchTarget target) {
  BatchItemTarget t;
  t.kind = TargetKind::segmentation;
  t.patch_target = std::move(target);
  return t;
}

void BatchItemTarget::check() const {
  if (kind == TargetKind::classification) {
    if (!y || patch_target) throw SchemaError("classification item needs a label and no mask");
    if (*y != 0 && *y != 1) throw SchemaError("classification label must be 0 or 1");
  } else if (!patch_target || y) {
    throw SchemaError("segmentation item needs a patch target and no label");
  }
}

template <class T>
BatchLoss<T> batch_loss(std::span<const ItemOutputs<T>> outputs, std::span<const BatchItemTarget> targets,
                        const FocalParams& focal) {
  if (outputs.size() != targets.size())
    throw SchemaError("batch has " + std::to_string(outputs.size()) + " outputs for " +
                      std::to_string(targets.size()) + " targets");
  if (targets.empty()) throw SchemaError("empty batch");
  BatchLoss<T> out;
  const std::size_t n = targets.size();
  const T inv = T(1) / static_cast<T>(n);
  out.per_item.resize(n);
  out.d_cls.assign(n, T(0));
  out.d_seg.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    targets[i].check();
    if (targets[i].kind == TargetKind::classification) {
      out.per_item[i] = bce_with_logits(outputs[i].cls_logit, *targets[i].y);
      out.d_cls[i] = bce_with_logits_grad(outputs[i].cls_logit, *targets[i].y) * inv;
    } else {
      out.per_item[i] = focal_loss(outputs[i].seg_logits, *targets[i].patch_target, focal, &out.d_seg[i]);
      for (auto& g : out.d_seg[i]) g *= inv;
    }
    total += static_cast<double>(out.per_item[i]);
  }
  out.loss = static_cast<T>(total / static_cast<double>(n));
  return out;
}

template float sigmoid<float>(float);
template double sigmoid<double>(double);
template float bce_with_logits<float>(float, int);
template double bce_with_logits<double>(double, int);
template float bce_with_logits_grad<float>(float, int);
template double bce_with_logits_grad<double>(double, int);
template float focal_loss<float>(std::span<const float>, const PatchTarget&, const FocalParams&, std::vector<float>*);
template double focal_loss<double>(std::span<const double>, const PatchTarget&, const FocalParams&, std::vector<double>*);
template BatchLoss<float> batch_loss<float>(std::span<const ItemOutputs<float>>, std::span<const BatchItemTarget>, const FocalParams&);
template BatchLoss<double> batch_loss<double>(std::span<const ItemOutputs<double>>, std::span<const BatchItemTarget>, const FocalParams&);

}  // namespace ctvlm
