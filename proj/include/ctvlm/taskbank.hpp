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
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ctvlm/common.hpp"

namespace ctvlm {

enum class TaskKind { diagnostic, prognostic, segmentation };
enum class Relation { in, around };
enum class Split { train, val, test };
enum class TaskCategory { shared, unique };

std::string_view to_string(TaskKind k);
std::string_view to_string(Relation r);
std::string_view to_string(Split s);
std::string_view to_string(TaskCategory c);
TaskKind parse_task_kind(std::string_view s);
Relation parse_relation(std::string_view s);
Split parse_split(std::string_view s);
TaskCategory parse_category(std::string_view s);

struct TaskDescription {
  TaskKind kind = TaskKind::diagnostic;
  std::string label_name;
  std::optional<std::string> organ;
  std::optional<Relation> relation;
  std::optional<int> horizon_months;
  std::string rendered;

  bool operator==(const TaskDescription&) const = default;
};

// Fills the template for `kind`:
//   diagnostic    "Diagnose the presence of <label> <in|around> the <organ>"
//   prognostic    "Predict the risk of <label> in <h> months"
//   segmentation  "Segment <label> in the image"
// Throws SchemaError when a slot required by the kind is missing or a slot
// belonging to another kind is supplied.
TaskDescription render_task_description(
    TaskKind kind, std::string label_name,
    std::optional<std::string> organ = std::nullopt,
    std::optional<Relation> relation = std::nullopt,
    std::optional<int> horizon_months = std::nullopt);

// Inverse of render_task_description.
TaskDescription parse_task_description(std::string_view rendered);

// Task key -> description. Keys are canonical snake_case.
class TaskBank {
 public:
  TaskBank() = default;

  static TaskBank from_json_text(std::string_view text);
  static TaskBank load(const std::filesystem::path& path);
  // The bank shipped in data/task_bank.json, compiled in.
  static const TaskBank& builtin();

  void add(std::string key, TaskDescription task);
  const TaskDescription* find(std::string_view key) const;
  const TaskDescription& at(std::string_view key) const;
  bool contains(std::string_view key) const { return find(key) != nullptr; }
  std::size_t size() const { return tasks_.size(); }
  const std::map<std::string, TaskDescription, std::less<>>& tasks() const {
    return tasks_;
  }
  std::vector<std::string> corpus() const;
  std::string to_json_text() const;

 private:
  std::map<std::string, TaskDescription, std::less<>> tasks_;
};

// Per-dataset shared/unique task lists shipped in data/dataset_tasks.json.
struct DatasetTaskLists {
  std::vector<std::string> shared;
  std::vector<std::string> unique;
  std::vector<std::string> segmentation;
};
const std::map<std::string, DatasetTaskLists, std::less<>>& builtin_dataset_tasks();

struct ManifestRecord {
  std::string volume;
  std::string dataset;
  Split split = Split::train;
  std::map<std::string, int> labels;
  std::map<std::string, std::string> masks;
  std::map<std::string, TaskCategory> categories;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  // Relative volume and mask paths resolve against this directory.
  std::filesystem::path base_dir;

  // Newline-delimited JSON, one record per line; blank lines are skipped.
  // A label value of null means the annotation is absent.
  static DatasetManifest parse_jsonl(std::istream& in,
                                     std::filesystem::path base_dir = {});
  static DatasetManifest load(const std::filesystem::path& path);
  void write_jsonl(std::ostream& out) const;

  std::filesystem::path resolve(const std::string& path) const;
  // Every referenced task key exists in the bank, splits are disjoint by
  // volume, labels are 0/1. Throws SchemaError.
  void validate(const TaskBank& bank) const;
  // Drops records whose volume appears in `volumes`.
  DatasetManifest excluding(const std::vector<std::string>& volumes) const;
};

struct BinaryLabel {
  int value = 0;
  bool operator==(const BinaryLabel&) const = default;
};
struct MaskRef {
  std::string path;
  bool operator==(const MaskRef&) const = default;
};

struct TaskInstance {
  std::string volume_ref;
  std::string dataset;
  Split split = Split::train;
  std::string task_key;
  TaskDescription task;
  std::variant<BinaryLabel, MaskRef> target;
  TaskCategory category = TaskCategory::shared;

  bool is_segmentation() const { return std::holds_alternative<MaskRef>(target); }
  int label() const { return std::get<BinaryLabel>(target).value; }
  const std::string& mask_path() const { return std::get<MaskRef>(target).path; }
  bool operator==(const TaskInstance&) const = default;
};

// One instance per present annotation. Volume and mask paths are resolved
// against the manifest base directory. With `check_mask_paths`, a mask file
// that does not exist raises IngestionError naming the record.
std::vector<TaskInstance> decompose_dataset(const DatasetManifest& manifest,
                                            const TaskBank& bank,
                                            bool check_mask_paths = true);

struct MixOptions {
  double seg_fraction = 0.10;
  int luna_factor = 10;
  std::string luna_dataset = "LUNA16";
};

struct MixResult {
  std::vector<TaskInstance> instances;
  std::vector<std::string> warnings;
};

// Balanced negatives per classification task, an extra organ-segmentation
// instance for floor(seg_fraction * n_volumes) volumes, LUNA16 replication,
// and a seeded shuffle. Pure in (instances, seed, options).
MixResult build_training_mix(const std::vector<TaskInstance>& instances,
                             std::uint64_t seed, const MixOptions& options = {});

void write_instances_jsonl(std::ostream& out, const std::vector<TaskInstance>& instances);
std::vector<TaskInstance> read_instances_jsonl(std::istream& in);

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnkId = 1;

struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::size_t length() const { return ids.size(); }
};

class Vocabulary {
 public:
  static constexpr std::size_t kDefaultCapacity = 512;

  // Words of the corpus, lowercased, most frequent first (ties
  // alphabetical), truncated so that the total size incl. PAD/UNK <= cap.
  static Vocabulary build(const std::vector<std::string>& corpus,
                          std::size_t capacity = kDefaultCapacity);
  static Vocabulary from_words(std::vector<std::string> words);

  // Lowercases and splits on anything that is not a letter or digit.
  static std::vector<std::string> split_words(std::string_view text);

  TokenSequence tokenize(std::string_view text, std::size_t max_length) const;
  std::int32_t id_of(std::string_view word) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;  // index == id
  std::map<std::string, std::int32_t, std::less<>> index_;
};

}  // namespace ctvlm
