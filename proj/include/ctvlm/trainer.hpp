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

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctvlm/losses.hpp"
#include "ctvlm/model.hpp"
#include "ctvlm/taskbank.hpp"
#include "ctvlm/volprep.hpp"

namespace ctvlm {

struct TrainConfig {
  int total_steps = 500;
  int batch_size = 8;
  double base_lr = 3e-4;
  int warmup_steps = 25;
  double weight_decay = 0.01;
  int val_interval = 100;
  std::uint64_t seed = 0;
  bool augment = true;
  std::optional<double> clip_grad_norm;
  FocalParams focal;
  AugmentConfig augmentation;

  static TrainConfig desk();
  // 25k steps, batch 64, validation every 5k steps.
  static TrainConfig paper();
  void check() const;
};

// Linear ramp 0 -> base over the warmup steps, then linear decay to 0 at
// total_steps.
double lr_schedule(int step, const TrainConfig& config);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// One decoupled-weight-decay Adam update with bias correction. `t` is the
// 1-based step number.
template <class T>
void adamw_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v,
                  std::int64_t t, double lr, const AdamWConfig& config);

template <class T>
struct OptimizerState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::int64_t step = 0;

  OptimizerState() = default;
  explicit OptimizerState(const ParameterStore<T>& params);
};

// Applies adamw_update to every tensor (weight decay only on tensors flagged
// for decay) and increments the step counter. A non-finite gradient raises
// NumericFault naming the tensor, before anything is modified.
template <class T>
void adamw_step(ParameterStore<T>& params, OptimizerState<T>& state, double lr, const AdamWConfig& config);

// Global L2 norm of all gradients; rescales them to `max_norm` when larger.
template <class T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm);

struct Sample {
  std::vector<float> input;        // model input array, x fastest
  std::vector<std::int32_t> ids;   // tokenized task description
  BatchItemTarget target;
};

// Produces model-ready samples. Augmentation is applied iff a seed is given.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual Sample fetch(const TaskInstance& instance, std::optional<std::uint64_t> augment_seed) const = 0;
};

struct MetricRecord {
  int step = 0;
  double train_loss = 0.0;
  std::optional<double> val_auroc_mean;
  std::map<std::string, double> per_task;

  std::string to_json() const;
  static MetricRecord from_json(const std::string& line);
};

struct TrainResult {
  std::vector<MetricRecord> log;
  std::vector<double> step_losses;
  std::vector<std::string> warnings;
};

// Called after each validation with the current model.
using CheckpointSink = std::function<void(const Model<float>&, const MetricRecord&)>;

// Classification-task AUROCs on `instances` (no augmentation). Tasks with one
// class are skipped with a warning; the mean is absent when no task is left.
struct ValidationResult {
  std::optional<double> mean_auroc;
  std::map<std::string, double> per_task;
  std::vector<std::string> warnings;
};
ValidationResult validate(const Model<float>& model, const std::vector<TaskInstance>& instances,
                          const SampleSource& source);

// Mixed classification/segmentation batches, AdamW with the warmup/decay
// schedule, validation every val_interval steps and at the end.
// Deterministic for a fixed config and seed.
TrainResult train(Model<float>& model, const std::vector<TaskInstance>& mix,
                  const std::vector<TaskInstance>& validation, const SampleSource& source,
                  const TrainConfig& config, const CheckpointSink& sink = {});

// Index of the best validation AUROC; earliest wins ties. Records without a
// validation value are skipped. Throws SelectionError when none qualify.
std::size_t select_checkpoint(const std::vector<MetricRecord>& log);
std::size_t select_checkpoint(const std::vector<double>& val_auroc);

}  // namespace ctvlm
