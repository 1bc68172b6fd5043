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

#include <random>

#include "ctvlm/trainer.hpp"
#include "doctest.h"
#include "memory_source.hpp"

using namespace ctvlm;

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.total_steps = 500;
  c.warmup_steps = 25;
  c.base_lr = 3e-4;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(25, c) == 3e-4);
  CHECK(lr_schedule(500, c) == 0.0);
  CHECK(lr_schedule(25 + 475 / 2.0 == 262.5 ? 262 : 0, c) > 0.0);
  // Midpoint of the decay segment.
  TrainConfig even = c;
  even.total_steps = 525;
  CHECK(lr_schedule(275, even) == doctest::Approx(1.5e-4).epsilon(1e-15));
  CHECK(lr_schedule(12, c) == doctest::Approx(3e-4 * 12 / 25.0).epsilon(1e-15));
  double peak = 0.0, prev = -1.0;
  for (int s = 0; s <= 500; ++s) {
    const double lr = lr_schedule(s, c);
    peak = std::max(peak, lr);
    if (prev >= 0.0) CHECK(std::abs(lr - prev) <= 3e-4 / 25.0 + 1e-18);
    prev = lr;
  }
  CHECK(peak == 3e-4);
  CHECK_THROWS_AS(lr_schedule(501, c), SchemaError);
  CHECK_THROWS_AS(lr_schedule(-1, c), SchemaError);
}

TEST_CASE("AdamW update") {
  AdamWConfig cfg;
  std::vector<double> theta{0.0}, m{0.0}, v{0.0};
  std::vector<double> g{1.0};
  adamw_update<double>(theta, g, m, v, 1, 1e-3, cfg);
  CHECK(std::abs(theta[0] + 1e-3) < 1e-6);

  std::vector<double> t2{0.7, -1.3}, z{0.0, 0.0}, m2{0, 0}, v2{0, 0};
  adamw_update<double>(t2, z, m2, v2, 1, 1e-3, cfg);
  CHECK(t2 == std::vector<double>{0.7, -1.3});

  cfg.weight_decay = 0.1;
  adamw_update<double>(t2, z, m2, v2, 2, 1e-2, cfg);
  CHECK(t2[0] == doctest::Approx(0.7 * (1 - 1e-2 * 0.1)).epsilon(1e-15));
  CHECK(t2[1] == doctest::Approx(-1.3 * (1 - 1e-2 * 0.1)).epsilon(1e-15));
}

TEST_CASE("AdamW reduces a convex quadratic") {
  ParameterStore<double> p;
  p.add("w", {3}, true);
  p[0].value = {1.0, -2.0, 0.5};
  OptimizerState<double> state(p);
  auto loss = [&] {
    double s = 0.0;
    for (double x : p[0].value) s += x * x;
    return s;
  };
  const double before = loss();
  for (std::size_t i = 0; i < 3; ++i) p[0].grad[i] = 2 * p[0].value[i];
  adamw_step(p, state, 1e-2, AdamWConfig{});
  CHECK(loss() < before);
  CHECK(state.step == 1);
}

TEST_CASE("AdamW rejects non-finite gradients before touching parameters") {
  ParameterStore<float> p;
  p.add("a", {2}, true);
  p.add("b.weight", {2}, true);
  p[0].value = {1.0f, 2.0f};
  p[0].grad = {0.5f, 0.5f};
  p[1].grad = {0.0f, std::numeric_limits<float>::quiet_NaN()};
  OptimizerState<float> state(p);
  try {
    adamw_step(p, state, 1e-3, AdamWConfig{});
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    CHECK(e.where() == "b.weight");
  }
  CHECK(p[0].value == AlignedVector<float>{1.0f, 2.0f});
  CHECK(state.step == 0);
}

TEST_CASE("gradient clipping") {
  ParameterStore<double> p;
  p.add("a", {2}, true);
  p[0].grad = {3.0, 4.0};
  CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(5.0));
  CHECK(p[0].grad[0] == doctest::Approx(0.6));
  CHECK(p[0].grad[1] == doctest::Approx(0.8));
}

TEST_CASE("checkpoint selection") {
  CHECK(select_checkpoint(std::vector<double>{0.6, 0.8, 0.7}) == 1u);
  CHECK(select_checkpoint(std::vector<double>{0.7, 0.7}) == 0u);
  CHECK_THROWS_AS(select_checkpoint(std::vector<double>{}), SelectionError);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> coarse(0, 20);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> log(50);
    for (auto& x : log) x = coarse(rng) / 20.0;
    std::size_t best = 0;
    for (std::size_t i = 1; i < log.size(); ++i)
      if (log[i] > log[best]) best = i;
    CHECK(select_checkpoint(log) == best);
  }
  std::vector<MetricRecord> records(3);
  records[0].val_auroc_mean = 0.6;
  records[2].val_auroc_mean = 0.9;
  CHECK(select_checkpoint(records) == 2u);
  CHECK_THROWS_AS(select_checkpoint(std::vector<MetricRecord>(2)), SelectionError);
}

TEST_CASE("metric record JSON") {
  MetricRecord r;
  r.step = 100;
  r.train_loss = 0.25;
  r.val_auroc_mean = 0.75;
  r.per_task["emphysema"] = 0.75;
  auto back = MetricRecord::from_json(r.to_json());
  CHECK(back.step == 100);
  CHECK(back.val_auroc_mean == 0.75);
  CHECK(back.per_task == r.per_task);
  MetricRecord none;
  CHECK(!MetricRecord::from_json(none.to_json()).val_auroc_mean);
  CHECK_THROWS_AS(MetricRecord::from_json("{}"), SchemaError);
}

namespace {

struct TinySetup {
  FrameSpec frame;
  ModelConfig model = ModelConfig::tiny();
  Vocabulary vocab = Vocabulary::build(TaskBank::builtin().corpus());
  std::unique_ptr<testing::MemorySource> source;
  std::vector<TaskInstance> train, val;

  TinySetup() {
    frame.frame_mm = {12, 12, 12};
    frame.crop_mm = {8, 8, 8};
    frame.input_shape = {8, 8, 8};
    model.vocab_size = static_cast<int>(vocab.size());
    model.max_text_length = 12;
    source = std::make_unique<testing::MemorySource>(frame, model, vocab);
    const auto& bank = TaskBank::builtin();
    for (int v = 0; v < 6; ++v) {
      const std::string ref = "vol" + std::to_string(v);
      VolumeGrid img(frame.frame_voxels(), {1, 1, 1}, v % 2 ? 400.0f : -400.0f);
      VolumeGrid mask(frame.frame_voxels(), {1, 1, 1});
      for (int z = 2; z < 8; ++z)
        for (int y = 3; y < 9; ++y)
          for (int x = 2; x < 7; ++x) mask.at(x, y, z) = 1.0f;
      source->add(ref, img, {{"seg_heart", mask}});
      TaskInstance t;
      t.volume_ref = ref;
      t.dataset = "CT-RATE";
      t.task_key = "emphysema";
      t.task = bank.at("emphysema");
      t.target = BinaryLabel{v % 2};
      (v < 4 ? train : val).push_back(t);
      if (v < 4) {
        TaskInstance s = t;
        s.task_key = "seg_heart";
        s.task = bank.at("seg_heart");
        s.target = MaskRef{"unused"};
        train.push_back(s);
      }
    }
    // A validation task with a single class.
    TaskInstance one = val[0];
    one.task_key = "atelectasis";
    one.task = bank.at("atelectasis");
    val.push_back(one);
  }
};

}  // namespace

TEST_CASE("zero training steps keep the initialisation") {
  TinySetup s;
  Model<float> model(s.model);
  Model<float> init(s.model);
  TrainConfig cfg;
  cfg.total_steps = 0;
  cfg.warmup_steps = 0;
  auto r = train(model, s.train, s.val, *s.source, cfg);
  for (std::size_t i = 0; i < model.params().size(); ++i) CHECK(model.params()[i].value == init.params()[i].value);
  REQUIRE(r.log.size() == 1u);
  CHECK(r.log[0].step == 0);
  CHECK(!r.warnings.empty());
}

TEST_CASE("training is deterministic and logs validation") {
  TinySetup s;
  TrainConfig cfg;
  cfg.total_steps = 12;
  cfg.warmup_steps = 2;
  cfg.batch_size = 3;
  cfg.val_interval = 5;
  cfg.base_lr = 1e-3;
  Model<float> a(s.model), b(s.model);
  std::vector<int> sink_steps;
  auto ra = train(a, s.train, s.val, *s.source, cfg,
                  [&](const Model<float>&, const MetricRecord& r) { sink_steps.push_back(r.step); });
  auto rb = train(b, s.train, s.val, *s.source, cfg);
  CHECK(sink_steps == std::vector<int>{5, 10, 12});
  REQUIRE(ra.log.size() == 3u);
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    CHECK(ra.log[i].to_json() == rb.log[i].to_json());
    REQUIRE(ra.log[i].val_auroc_mean);
    CHECK(*ra.log[i].val_auroc_mean >= 0.0);
    CHECK(*ra.log[i].val_auroc_mean <= 1.0);
    CHECK(ra.log[i].per_task.count("atelectasis") == 0u);
  }
  CHECK(ra.step_losses == rb.step_losses);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    double diff = 0;
    for (std::size_t j = 0; j < a.params()[i].size(); ++j) diff = std::max(diff, double(std::abs(a.params()[i].value[j] - b.params()[i].value[j])));
    INFO(a.params()[i].name << " diff " << diff);
    CHECK(a.params()[i].value == b.params()[i].value);
  }
  bool warned = false;
  for (auto& w : ra.warnings) warned |= w.find("atelectasis") != std::string::npos;
  CHECK(warned);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.warmup_steps = 600;
  CHECK_THROWS_AS(c.check(), SchemaError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.check(), SchemaError);
  CHECK(TrainConfig::paper().total_steps == 25000);
  CHECK(TrainConfig::paper().batch_size == 64);
}
