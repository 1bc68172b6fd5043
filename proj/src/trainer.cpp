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

#include "ctvlm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ctvlm/metrics.hpp"
#include "json.hpp"

namespace ctvlm {

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.total_steps = 25000;
  c.batch_size = 64;
  c.val_interval = 5000;
  return c;
}

void TrainConfig::check() const {
  if (total_steps < 0) throw SchemaError("total steps must be non-negative");
  if (batch_size < 1) throw SchemaError("batch size must be at least 1");
  if (warmup_steps < 0 || (total_steps > 0 && warmup_steps >= total_steps))
    throw SchemaError("warmup steps must be smaller than total steps");
  if (val_interval < 1) throw SchemaError("validation interval must be positive");
  if (!(base_lr >= 0)) throw SchemaError("learning rate must be non-negative");
}

double lr_schedule(int step, const TrainConfig& config) {
  const int total = config.total_steps;
  const int warmup = config.warmup_steps;
  if (step < 0 || step > total) throw SchemaError("step outside [0, total_steps]");
  if (step < warmup) return config.base_lr * static_cast<double>(step) / warmup;
  if (total == warmup) return config.base_lr;
  return config.base_lr * static_cast<double>(total - step) / static_cast<double>(total - warmup);
}

template <class T>
void adamw_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::int64_t t,
                  double lr, const AdamWConfig& c) {
  if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size())
    throw ShapeError("AdamW buffers differ in size");
  if (t < 1) throw SchemaError("AdamW step number starts at 1");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    double th = static_cast<double>(theta[i]);
    const double g = static_cast<double>(grad[i]);
    th -= lr * c.weight_decay * th;
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    th -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
    theta[i] = static_cast<T>(th);
  }
}

template <class T>
OptimizerState<T>::OptimizerState(const ParameterStore<T>& params) {
  for (auto& p : params) {
    m.emplace_back(p.size(), T(0));
    v.emplace_back(p.size(), T(0));
  }
}

template <class T>
void adamw_step(ParameterStore<T>& params, OptimizerState<T>& state, double lr, const AdamWConfig& config) {
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match parameters");
  for (auto& p : params)
    for (T g : p.grad)
      if (!std::isfinite(g)) throw NumericFault(p.name, "non-finite gradient");
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    AdamWConfig c = config;
    if (!p.decay) c.weight_decay = 0.0;
    adamw_update<T>(p.value, p.grad, state.m[i], state.v[i], state.step, lr, c);
  }
}

template <class T>
double clip_grad_norm(ParameterStore<T>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    for (T g : p.grad) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (T& g : p.grad) g *= s;
  }
  return norm;
}

template void adamw_update<float>(std::span<float>, std::span<const float>, std::span<float>, std::span<float>,
                                  std::int64_t, double, const AdamWConfig&);
template void adamw_update<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   std::span<double>, std::int64_t, double, const AdamWConfig&);
template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step<float>(ParameterStore<float>&, OptimizerState<float>&, double, const AdamWConfig&);
template void adamw_step<double>(ParameterStore<double>&, OptimizerState<double>&, double, const AdamWConfig&);
template double clip_grad_norm<float>(ParameterStore<float>&, double);
template double clip_grad_norm<double>(ParameterStore<double>&, double);

// ---------------------------------------------------------------------------

std::string MetricRecord::to_json() const {
  nlohmann::json j;
  j["step"] = step;
  j["train_loss"] = train_loss;
  j["val_auroc_mean"] = val_auroc_mean ? nlohmann::json(*val_auroc_mean) : nlohmann::json(nullptr);
  j["per_task"] = per_task;
  return j.dump();
}

MetricRecord MetricRecord::from_json(const std::string& line) {
  try {
    auto j = nlohmann::json::parse(line);
    MetricRecord r;
    r.step = j.at("step").get<int>();
    r.train_loss = j.at("train_loss").get<double>();
    if (!j.at("val_auroc_mean").is_null()) r.val_auroc_mean = j["val_auroc_mean"].get<double>();
    r.per_task = j.value("per_task", std::map<std::string, double>{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("bad metric record: ") + e.what());
  }
}

ValidationResult validate(const Model<float>& model, const std::vector<TaskInstance>& instances,
                          const SampleSource& source) {
  std::map<std::string, ScoredSet> sets;
  for (const auto& inst : instances) {
    if (inst.is_segmentation()) continue;
    Sample s = source.fetch(inst, std::nullopt);
    auto out = model.forward(s.input, s.ids);
    auto& set = sets[inst.task_key];
    set.scores.push_back(out.cls_logit);
    set.labels.push_back(inst.label());
  }
  ValidationResult r;
  double sum = 0.0;
  for (auto& [key, set] : sets) {
    if (set.positives() == 0 || set.negatives() == 0) {
      r.warnings.push_back("validation task '" + key + "' has a single class; excluded from the mean");
      continue;
    }
    double a = auroc(set);
    r.per_task[key] = a;
    sum += a;
  }
  if (!r.per_task.empty()) r.mean_auroc = sum / static_cast<double>(r.per_task.size());
  return r;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t step, std::uint64_t item) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(item)};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
  return out[0];
}

}  // namespace

TrainResult train(Model<float>& model, const std::vector<TaskInstance>& mix,
                  const std::vector<TaskInstance>& validation, const SampleSource& source,
                  const TrainConfig& config, const CheckpointSink& sink) {
  config.check();
  if (config.total_steps > 0 && mix.empty()) throw SchemaError("training mix is empty");
  TrainResult result;
  auto record_validation = [&](int step, double train_loss) {
    auto v = validate(model, validation, source);
    MetricRecord rec;
    rec.step = step;
    rec.train_loss = train_loss;
    rec.val_auroc_mean = v.mean_auroc;
    rec.per_task = std::move(v.per_task);
    for (auto& w : v.warnings)
      if (std::find(result.warnings.begin(), result.warnings.end(), w) == result.warnings.end())
        result.warnings.push_back(w);
    result.log.push_back(rec);
    if (sink) sink(model, rec);
  };

  if (config.total_steps == 0) {
    result.warnings.push_back("total_steps is 0; the checkpoint is the initialization");
    record_validation(0, 0.0);
    return result;
  }

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(mix.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  OptimizerState<float> opt(model.params());
  AdamWConfig adam;
  adam.weight_decay = config.weight_decay;
  const std::size_t batch = static_cast<std::size_t>(config.batch_size);
  std::vector<Sample> samples(batch);
  std::vector<std::shared_ptr<Model<float>::Cache>> caches;
  for (std::size_t i = 0; i < batch; ++i) caches.push_back(model.make_cache());
  std::vector<ModelOutput<float>> outputs(batch);
  double interval_loss = 0.0;
  int interval_steps = 0;

  for (int step = 0; step < config.total_steps; ++step) {
    model.params().zero_grad();
    std::vector<ItemOutputs<float>> views(batch);
    std::vector<BatchItemTarget> targets(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const TaskInstance& inst = mix[order[cursor++]];
      std::optional<std::uint64_t> aug;
      if (config.augment) aug = mix_seed(config.seed, static_cast<std::uint64_t>(step), i);
      samples[i] = source.fetch(inst, aug);
      outputs[i] = model.forward(samples[i].input, samples[i].ids, caches[i].get());
      views[i] = {outputs[i].cls_logit, outputs[i].seg_logits};
      targets[i] = samples[i].target;
    }
    auto loss = batch_loss<float>(views, targets, config.focal);
    for (std::size_t i = 0; i < batch; ++i) model.backward(*caches[i], loss.d_cls[i], loss.d_seg[i]);
    if (config.clip_grad_norm) clip_grad_norm(model.params(), *config.clip_grad_norm);
    adamw_step(model.params(), opt, lr_schedule(step, config), adam);

    result.step_losses.push_back(loss.loss);
    interval_loss += loss.loss;
    ++interval_steps;
    const int done = step + 1;
    if (done % config.val_interval == 0 || done == config.total_steps) {
      record_validation(done, interval_loss / interval_steps);
      interval_loss = 0.0;
      interval_steps = 0;
    }
  }
  return result;
}

std::size_t select_checkpoint(const std::vector<MetricRecord>& log) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < log.size(); ++i) {
    if (!log[i].val_auroc_mean) continue;
    if (!best || *log[i].val_auroc_mean > *log[*best].val_auroc_mean) best = i;
  }
  if (!best) throw SelectionError("no validation record to select a checkpoint from");
  return *best;
}

std::size_t select_checkpoint(const std::vector<double>& val_auroc) {
  if (val_auroc.empty()) throw SelectionError("empty metric log");
  return static_cast<std::size_t>(std::max_element(val_auroc.begin(), val_auroc.end()) - val_auroc.begin());
}

}  // namespace ctvlm
