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

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ctvlm/taskbank.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace ctvlm;

namespace {

TaskInstance make_label(std::string volume, std::string dataset, std::string key, int y) {
  TaskInstance t;
  t.volume_ref = std::move(volume);
  t.dataset = std::move(dataset);
  t.task_key = key;
  t.task = TaskBank::builtin().at(key);
  t.target = BinaryLabel{y};
  return t;
}

TaskInstance make_mask(std::string volume, std::string dataset, std::string key) {
  TaskInstance t;
  t.volume_ref = volume;
  t.dataset = std::move(dataset);
  t.task_key = key;
  t.task = TaskBank::builtin().at(key);
  t.target = MaskRef{volume + "." + key + ".nii.gz"};
  return t;
}

}  // namespace

TEST_CASE("templates render verbatim") {
  CHECK(render_task_description(TaskKind::diagnostic, "pleural effusion", "lungs", Relation::around).rendered ==
        "Diagnose the presence of pleural effusion around the lungs");
  CHECK(render_task_description(TaskKind::prognostic, "mortality", std::nullopt, std::nullopt, 6).rendered ==
        "Predict the risk of mortality in 6 months");
  CHECK(render_task_description(TaskKind::prognostic, "mortality", std::nullopt, std::nullopt, 1).rendered ==
        "Predict the risk of mortality in 1 month");
  CHECK(render_task_description(TaskKind::segmentation, "the lungs").rendered == "Segment the lungs in the image");
}

TEST_CASE("templates reject inconsistent slots") {
  CHECK_THROWS_AS(render_task_description(TaskKind::diagnostic, "effusion"), SchemaError);
  CHECK_THROWS_AS(render_task_description(TaskKind::prognostic, "mortality"), SchemaError);
  CHECK_THROWS_AS(render_task_description(TaskKind::prognostic, "mortality", std::nullopt, std::nullopt, 0),
                  SchemaError);
  CHECK_THROWS_AS(render_task_description(TaskKind::segmentation, "the lungs", "lungs", Relation::in), SchemaError);
  CHECK_THROWS_AS(render_task_description(TaskKind::segmentation, ""), SchemaError);
}

TEST_CASE("every built-in task round-trips through its rendering") {
  const auto& bank = TaskBank::builtin();
  CHECK(bank.size() > 100u);
  for (const auto& [key, task] : bank.tasks()) {
    INFO(key);
    CHECK(parse_task_description(task.rendered) == task);
  }
  CHECK_THROWS_AS(parse_task_description("Describe the image"), SchemaError);
  auto again = TaskBank::from_json_text(bank.to_json_text());
  CHECK(again.tasks() == bank.tasks());
}

TEST_CASE("built-in dataset lists reference bank tasks") {
  const auto& bank = TaskBank::builtin();
  const auto& lists = builtin_dataset_tasks();
  CHECK(lists.at("CT-RATE").shared.size() == 18u);
  CHECK(lists.at("LUNA16").segmentation.size() == 1u);
  for (const auto& [ds, l] : lists)
    for (const auto* v : {&l.shared, &l.unique, &l.segmentation})
      for (const auto& key : *v) {
        INFO(ds << " " << key);
        CHECK(bank.contains(key));
      }
}

TEST_CASE("decomposition counts present annotations") {
  const auto& bank = TaskBank::builtin();
  const auto& ctrate = builtin_dataset_tasks().at("CT-RATE").shared;
  std::ostringstream jsonl;
  for (int v = 0; v < 10; ++v) {
    nlohmann::json rec{{"volume", "vol" + std::to_string(v) + ".nii.gz"}, {"dataset", "CT-RATE"}, {"split", "train"}};
    for (std::size_t i = 0; i < ctrate.size(); ++i) rec["labels"][ctrate[i]] = static_cast<int>((v + i) % 2);
    jsonl << rec.dump() << "\n";
  }
  std::istringstream in(jsonl.str());
  auto manifest = DatasetManifest::parse_jsonl(in);
  manifest.validate(bank);
  auto instances = decompose_dataset(manifest, bank, false);
  CHECK(instances.size() == 180u);

  std::istringstream mixed(
      R"({"volume": "a.nii", "dataset": "CT-RATE", "split": "train", "labels": {"atelectasis": 1, "emphysema": 0, "cardiomegaly": null}, "masks": {"seg_lungs": "a_lungs.nii"}})"
      "\n");
  auto m2 = DatasetManifest::parse_jsonl(mixed);
  auto i2 = decompose_dataset(m2, bank, false);
  CHECK(i2.size() == 3u);
  int seg = 0;
  for (auto& t : i2) {
    seg += t.is_segmentation();
    CHECK(t.volume_ref == i2[0].volume_ref);
    CHECK((t.task.kind == TaskKind::segmentation) == t.is_segmentation());
  }
  CHECK(seg == 1);
  CHECK_THROWS_AS(decompose_dataset(m2, bank, true), IngestionError);
}

TEST_CASE("manifest validation") {
  const auto& bank = TaskBank::builtin();
  std::istringstream unknown(R"({"volume": "a", "dataset": "X", "split": "train", "labels": {"no_such_task": 1}})");
  CHECK_THROWS_AS(DatasetManifest::parse_jsonl(unknown).validate(bank), SchemaError);
  std::istringstream overlap(R"({"volume": "a", "dataset": "X", "split": "train", "labels": {"atelectasis": 1}}
{"volume": "a", "dataset": "X", "split": "test", "labels": {"atelectasis": 0}})");
  CHECK_THROWS_AS(DatasetManifest::parse_jsonl(overlap).validate(bank), SchemaError);
  std::istringstream bad_split(R"({"volume": "a", "dataset": "X", "split": "dev", "labels": {}})");
  CHECK_THROWS_AS(DatasetManifest::parse_jsonl(bad_split), SchemaError);
  std::istringstream bad_label(R"({"volume": "a", "dataset": "X", "split": "train", "labels": {"atelectasis": 3}})");
  CHECK_THROWS_AS(DatasetManifest::parse_jsonl(bad_label).validate(bank), SchemaError);
  std::istringstream excl(R"({"volume": "a", "dataset": "X", "split": "train", "labels": {"atelectasis": 1}}
{"volume": "brain", "dataset": "X", "split": "val", "labels": {"atelectasis": 0}})");
  CHECK(DatasetManifest::parse_jsonl(excl).excluding({"brain"}).records.size() == 1u);
}

TEST_CASE("balancing keeps positives and matches negatives") {
  std::vector<TaskInstance> in;
  for (int v = 0; v < 55; ++v) in.push_back(make_label("v" + std::to_string(v), "CT-RATE", "emphysema", v < 5));
  for (int v = 0; v < 7; ++v) in.push_back(make_label("v" + std::to_string(v), "CT-RATE", "atelectasis", v < 5));
  for (int v = 0; v < 4; ++v) in.push_back(make_label("v" + std::to_string(v), "CT-RATE", "cardiomegaly", 0));
  auto mix = build_training_mix(in, 3, {0.0, 10, "LUNA16"});
  std::map<std::string, std::pair<int, int>> counts;
  std::set<std::string> neg_volumes;
  for (auto& t : mix.instances) {
    auto& c = counts[t.task_key];
    (t.label() ? c.first : c.second)++;
    if (t.task_key == "emphysema" && !t.label()) CHECK(neg_volumes.insert(t.volume_ref).second);
  }
  CHECK(counts["emphysema"] == std::pair{5, 5});
  CHECK(counts["atelectasis"] == std::pair{5, 2});
  CHECK(counts.count("cardiomegaly") == 0u);
  CHECK(mix.warnings.size() == 1u);
}

TEST_CASE("LUNA16 replication and extra segmentation instances") {
  std::vector<TaskInstance> luna;
  for (int v = 0; v < 601; ++v) luna.push_back(make_mask("luna" + std::to_string(v), "LUNA16", "seg_lung_nodules"));
  CHECK(build_training_mix(luna, 1).instances.size() == 6010u);

  std::vector<TaskInstance> in;
  for (int v = 0; v < 100; ++v) {
    const auto vol = "ts" + std::to_string(v);
    in.push_back(make_label(vol, "CT-RATE", "emphysema", v % 2));
    in.push_back(make_mask(vol, "TotalSegmentator", "seg_lungs"));
    in.push_back(make_mask(vol, "TotalSegmentator", "seg_heart"));
  }
  auto mix = build_training_mix(in, 5);
  std::set<std::string> seg_volumes;
  int seg = 0;
  for (auto& t : mix.instances)
    if (t.is_segmentation()) {
      ++seg;
      seg_volumes.insert(t.volume_ref);
    }
  CHECK(seg == 10);
  CHECK(seg_volumes.size() == 10u);
  CHECK(mix.instances.size() == 110u);
}

TEST_CASE("mixing is a pure function of the seed") {
  std::vector<TaskInstance> in;
  for (int v = 0; v < 80; ++v) {
    in.push_back(make_label("v" + std::to_string(v), "RADCHEST", "emphysema", v % 5 == 0));
    in.push_back(make_mask("v" + std::to_string(v), "TotalSegmentator", "seg_lungs"));
  }
  auto a = build_training_mix(in, 42).instances;
  auto b = build_training_mix(in, 42).instances;
  auto c = build_training_mix(in, 43).instances;
  CHECK(a == b);
  CHECK(a != c);

  std::stringstream ss;
  write_instances_jsonl(ss, a);
  CHECK(read_instances_jsonl(ss) == a);
}

TEST_CASE("vocabulary and tokenisation") {
  auto vocab = Vocabulary::build(TaskBank::builtin().corpus());
  CHECK(vocab.size() <= 512u);
  CHECK(vocab.words()[kPadId] == "[PAD]");
  CHECK(vocab.words()[kUnkId] == "[UNK]");
  auto seq = vocab.tokenize("segment the lungs in the image", 32);
  REQUIRE(seq.length() == 6u);
  for (auto id : seq.ids) {
    CHECK(id != kUnkId);
    CHECK(id != kPadId);
    CHECK(static_cast<std::size_t>(id) < vocab.size());
  }
  CHECK(seq.ids == vocab.tokenize("Segment the LUNGS in the image", 32).ids);
  auto oov = vocab.tokenize("segment the florbix in the image", 32);
  CHECK(std::count(oov.ids.begin(), oov.ids.end(), kUnkId) == 1);
  CHECK(oov.ids[2] == kUnkId);
  CHECK(vocab.tokenize("segment the lungs in the image", 3).length() == 3u);
  CHECK_THROWS_AS(vocab.tokenize("  ,. ", 32), SchemaError);
  CHECK(Vocabulary::split_words("Diagnose pleural-effusion, 12 months") ==
        std::vector<std::string>{"diagnose", "pleural", "effusion", "12", "months"});

  auto small = Vocabulary::build({"a a a b b c"}, 4);
  CHECK(small.words() == std::vector<std::string>{"[PAD]", "[UNK]", "a", "b"});
}
