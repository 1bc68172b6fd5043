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

#include "ctvlm/taskbank.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace ctvlm {

namespace detail {
extern const std::string_view kTaskBankJson;
extern const std::string_view kDatasetTasksJson;
}  // namespace detail

using nlohmann::json;

std::string to_string(const Dims3& d) {
  return "(" + std::to_string(d.x) + ", " + std::to_string(d.y) + ", " +
         std::to_string(d.z) + ")";
}

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::diagnostic: return "diagnostic";
    case TaskKind::prognostic: return "prognostic";
    case TaskKind::segmentation: return "segmentation";
  }
  return "?";
}
std::string_view to_string(Relation r) { return r == Relation::in ? "in" : "around"; }
std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}
std::string_view to_string(TaskCategory c) {
  return c == TaskCategory::shared ? "shared" : "unique";
}

TaskKind parse_task_kind(std::string_view s) {
  if (s == "diagnostic") return TaskKind::diagnostic;
  if (s == "prognostic") return TaskKind::prognostic;
  if (s == "segmentation") return TaskKind::segmentation;
  throw SchemaError("unknown task kind '" + std::string(s) + "'");
}
Relation parse_relation(std::string_view s) {
  if (s == "in") return Relation::in;
  if (s == "around") return Relation::around;
  throw SchemaError("unknown relation '" + std::string(s) + "'");
}
Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw SchemaError("unknown split '" + std::string(s) + "'");
}
TaskCategory parse_category(std::string_view s) {
  if (s == "shared") return TaskCategory::shared;
  if (s == "unique") return TaskCategory::unique;
  throw SchemaError("unknown task category '" + std::string(s) + "'");
}

namespace {

constexpr std::string_view kDiagnosePrefix = "Diagnose the presence of ";
constexpr std::string_view kPredictPrefix = "Predict the risk of ";
constexpr std::string_view kSegmentPrefix = "Segment ";
constexpr std::string_view kSegmentSuffix = " in the image";

std::string months_phrase(int h) {
  return std::to_string(h) + (h == 1 ? " month" : " months");
}

bool starts_with(std::string_view s, std::string_view p) {
  return s.substr(0, p.size()) == p;
}
bool ends_with(std::string_view s, std::string_view p) {
  return s.size() >= p.size() && s.substr(s.size() - p.size()) == p;
}

}  // namespace

TaskDescription render_task_description(TaskKind kind, std::string label_name,
                                        std::optional<std::string> organ,
                                        std::optional<Relation> relation,
                                        std::optional<int> horizon_months) {
  if (label_name.empty()) throw SchemaError("task label name is empty");
  TaskDescription t;
  t.kind = kind;
  switch (kind) {
    case TaskKind::diagnostic:
      if (!organ || organ->empty() || !relation)
        throw SchemaError("diagnostic task '" + label_name + "' needs organ and relation");
      if (horizon_months) throw SchemaError("diagnostic task '" + label_name + "' has a horizon");
      t.rendered = std::string(kDiagnosePrefix) + label_name + " " +
                   std::string(to_string(*relation)) + " the " + *organ;
      break;
    case TaskKind::prognostic:
      if (!horizon_months || *horizon_months <= 0)
        throw SchemaError("prognostic task '" + label_name + "' needs a positive horizon");
      if (organ || relation)
        throw SchemaError("prognostic task '" + label_name + "' has organ/relation slots");
      t.rendered = std::string(kPredictPrefix) + label_name + " in " +
                   months_phrase(*horizon_months);
      break;
    case TaskKind::segmentation:
      if (organ || relation || horizon_months)
        throw SchemaError("segmentation task '" + label_name + "' has extra slots");
      t.rendered = std::string(kSegmentPrefix) + label_name + std::string(kSegmentSuffix);
      break;
  }
  t.label_name = std::move(label_name);
  t.organ = std::move(organ);
  t.relation = relation;
  t.horizon_months = horizon_months;
  return t;
}

TaskDescription parse_task_description(std::string_view text) {
  auto fail = [&] { return SchemaError("not a task description: '" + std::string(text) + "'"); };
  if (starts_with(text, kDiagnosePrefix)) {
    std::string_view rest = text.substr(kDiagnosePrefix.size());
    auto in_pos = rest.rfind(" in the ");
    auto around_pos = rest.rfind(" around the ");
    std::size_t pos;
    Relation rel;
    std::size_t skip;
    if (around_pos != std::string_view::npos &&
        (in_pos == std::string_view::npos || around_pos > in_pos)) {
      pos = around_pos, rel = Relation::around, skip = 12;
    } else if (in_pos != std::string_view::npos) {
      pos = in_pos, rel = Relation::in, skip = 8;
    } else {
      throw fail();
    }
    return render_task_description(TaskKind::diagnostic, std::string(rest.substr(0, pos)),
                                   std::string(rest.substr(pos + skip)), rel);
  }
  if (starts_with(text, kPredictPrefix)) {
    std::string_view rest = text.substr(kPredictPrefix.size());
    std::string_view unit = ends_with(rest, " months") ? " months" : " month";
    if (!ends_with(rest, unit)) throw fail();
    rest.remove_suffix(unit.size());
    auto pos = rest.rfind(" in ");
    if (pos == std::string_view::npos) throw fail();
    std::string number(rest.substr(pos + 4));
    if (number.empty() || !std::all_of(number.begin(), number.end(), ::isdigit)) throw fail();
    auto t = render_task_description(TaskKind::prognostic, std::string(rest.substr(0, pos)),
                                     std::nullopt, std::nullopt, std::stoi(number));
    if (t.rendered != text) throw fail();
    return t;
  }
  if (starts_with(text, kSegmentPrefix) && ends_with(text, kSegmentSuffix)) {
    std::string_view label = text.substr(kSegmentPrefix.size());
    label.remove_suffix(kSegmentSuffix.size());
    return render_task_description(TaskKind::segmentation, std::string(label));
  }
  throw fail();
}

// ---------------------------------------------------------------------------
// TaskBank

namespace {

TaskDescription task_from_slots(const std::string& key, const json& j) {
  try {
    auto kind = parse_task_kind(j.at("kind").get<std::string>());
    std::optional<std::string> organ;
    std::optional<Relation> rel;
    std::optional<int> horizon;
    if (j.contains("organ")) organ = j["organ"].get<std::string>();
    if (j.contains("relation")) rel = parse_relation(j["relation"].get<std::string>());
    if (j.contains("horizon_months")) horizon = j["horizon_months"].get<int>();
    return render_task_description(kind, j.at("label").get<std::string>(), organ, rel, horizon);
  } catch (const json::exception& e) {
    throw SchemaError("task '" + key + "': " + e.what());
  } catch (const SchemaError& e) {
    throw SchemaError("task '" + key + "': " + e.what());
  }
}

json slots_to_json(const TaskDescription& t) {
  json j;
  j["kind"] = to_string(t.kind);
  j["label"] = t.label_name;
  if (t.organ) j["organ"] = *t.organ;
  if (t.relation) j["relation"] = to_string(*t.relation);
  if (t.horizon_months) j["horizon_months"] = *t.horizon_months;
  return j;
}

}  // namespace

TaskBank TaskBank::from_json_text(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("task bank is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("task bank must be a JSON object");
  TaskBank bank;
  for (auto& [key, slots] : j.items()) bank.add(key, task_from_slots(key, slots));
  return bank;
}

TaskBank TaskBank::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open task bank " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

const TaskBank& TaskBank::builtin() {
  static const TaskBank bank = from_json_text(detail::kTaskBankJson);
  return bank;
}

void TaskBank::add(std::string key, TaskDescription task) {
  if (key.empty()) throw SchemaError("empty task key");
  tasks_.insert_or_assign(std::move(key), std::move(task));
}

const TaskDescription* TaskBank::find(std::string_view key) const {
  auto it = tasks_.find(key);
  return it == tasks_.end() ? nullptr : &it->second;
}

const TaskDescription& TaskBank::at(std::string_view key) const {
  if (auto* t = find(key)) return *t;
  throw SchemaError("task '" + std::string(key) + "' is not in the task bank");
}

std::vector<std::string> TaskBank::corpus() const {
  std::vector<std::string> out;
  out.reserve(tasks_.size());
  for (auto& [_, t] : tasks_) out.push_back(t.rendered);
  return out;
}

std::string TaskBank::to_json_text() const {
  json j = json::object();
  for (auto& [key, t] : tasks_) j[key] = slots_to_json(t);
  return j.dump(2);
}

const std::map<std::string, DatasetTaskLists, std::less<>>& builtin_dataset_tasks() {
  static const auto lists = [] {
    std::map<std::string, DatasetTaskLists, std::less<>> out;
    auto j = json::parse(detail::kDatasetTasksJson);
    for (auto& [name, v] : j.items()) {
      DatasetTaskLists l;
      l.shared = v.value("shared", std::vector<std::string>{});
      l.unique = v.value("unique", std::vector<std::string>{});
      l.segmentation = v.value("segmentation", std::vector<std::string>{});
      out.emplace(name, std::move(l));
    }
    return out;
  }();
  return lists;
}

// ---------------------------------------------------------------------------
// Manifest

DatasetManifest DatasetManifest::parse_jsonl(std::istream& in, std::filesystem::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }))
      continue;
    auto where = "manifest line " + std::to_string(line_no);
    try {
      auto j = json::parse(line);
      ManifestRecord r;
      r.volume = j.at("volume").get<std::string>();
      r.dataset = j.at("dataset").get<std::string>();
      r.split = parse_split(j.at("split").get<std::string>());
      if (j.contains("labels")) {
        for (auto& [k, v] : j["labels"].items()) {
          if (v.is_null()) continue;
          if (!v.is_number_integer() && !v.is_boolean())
            throw SchemaError("label '" + k + "' must be 0 or 1");
          int value = v.is_boolean() ? static_cast<int>(v.get<bool>()) : v.get<int>();
          r.labels.emplace(k, value);
        }
      }
      if (j.contains("masks"))
        for (auto& [k, v] : j["masks"].items()) r.masks.emplace(k, v.get<std::string>());
      if (j.contains("categories"))
        for (auto& [k, v] : j["categories"].items())
          r.categories.emplace(k, parse_category(v.get<std::string>()));
      m.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    } catch (const SchemaError& e) {
      throw SchemaError(where + ": " + e.what());
    }
  }
  return m;
}

DatasetManifest DatasetManifest::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open manifest " + path.string());
  return parse_jsonl(in, path.parent_path());
}

void DatasetManifest::write_jsonl(std::ostream& out) const {
  for (auto& r : records) {
    json j;
    j["volume"] = r.volume;
    j["dataset"] = r.dataset;
    j["split"] = to_string(r.split);
    j["labels"] = json::object();
    for (auto& [k, v] : r.labels) j["labels"][k] = v;
    j["masks"] = json::object();
    for (auto& [k, v] : r.masks) j["masks"][k] = v;
    j["categories"] = json::object();
    for (auto& [k, v] : r.categories) j["categories"][k] = to_string(v);
    out << j.dump() << '\n';
  }
}

std::filesystem::path DatasetManifest::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  if (p.is_absolute() || base_dir.empty()) return p;
  return base_dir / p;
}

void DatasetManifest::validate(const TaskBank& bank) const {
  std::map<std::string, Split> split_of;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    auto where = "record " + std::to_string(i) + " (" + r.volume + ")";
    if (r.volume.empty()) throw SchemaError(where + ": empty volume path");
    auto [it, inserted] = split_of.emplace(r.volume, r.split);
    if (!inserted && it->second != r.split)
      throw SchemaError(where + ": volume appears in both " + std::string(to_string(it->second)) +
                        " and " + std::string(to_string(r.split)) + " splits");
    for (auto& [key, value] : r.labels) {
      const auto* task = bank.find(key);
      if (!task) throw SchemaError(where + ": label '" + key + "' is not in the task bank");
      if (task->kind == TaskKind::segmentation)
        throw SchemaError(where + ": label '" + key + "' names a segmentation task");
      if (value != 0 && value != 1)
        throw SchemaError(where + ": label '" + key + "' must be 0 or 1");
    }
    for (auto& [key, path] : r.masks) {
      const auto* task = bank.find(key);
      if (!task) throw SchemaError(where + ": mask '" + key + "' is not in the task bank");
      if (task->kind != TaskKind::segmentation)
        throw SchemaError(where + ": mask '" + key + "' names a classification task");
      if (path.empty()) throw SchemaError(where + ": mask '" + key + "' has an empty path");
    }
  }
}

DatasetManifest DatasetManifest::excluding(const std::vector<std::string>& volumes) const {
  std::set<std::string, std::less<>> drop(volumes.begin(), volumes.end());
  DatasetManifest out;
  out.base_dir = base_dir;
  for (auto& r : records)
    if (!drop.contains(r.volume)) out.records.push_back(r);
  return out;
}

namespace {

TaskCategory category_for(const ManifestRecord& r, const std::string& key) {
  if (auto it = r.categories.find(key); it != r.categories.end()) return it->second;
  const auto& lists = builtin_dataset_tasks();
  if (auto it = lists.find(r.dataset); it != lists.end()) {
    const auto& u = it->second.unique;
    if (std::find(u.begin(), u.end(), key) != u.end()) return TaskCategory::unique;
  }
  return TaskCategory::shared;
}

}  // namespace

std::vector<TaskInstance> decompose_dataset(const DatasetManifest& manifest, const TaskBank& bank,
                                            bool check_mask_paths) {
  manifest.validate(bank);
  std::vector<TaskInstance> out;
  for (const auto& r : manifest.records) {
    auto volume = manifest.resolve(r.volume).string();
    for (auto& [key, value] : r.labels) {
      TaskInstance t;
      t.volume_ref = volume;
      t.dataset = r.dataset;
      t.split = r.split;
      t.task_key = key;
      t.task = bank.at(key);
      t.target = BinaryLabel{value};
      t.category = category_for(r, key);
      out.push_back(std::move(t));
    }
    for (auto& [key, path] : r.masks) {
      auto resolved = manifest.resolve(path);
      if (check_mask_paths && !std::filesystem::exists(resolved))
        throw IngestionError(r.volume, "mask '" + key + "' points to missing file " +
                                           resolved.string());
      TaskInstance t;
      t.volume_ref = volume;
      t.dataset = r.dataset;
      t.split = r.split;
      t.task_key = key;
      t.task = bank.at(key);
      t.target = MaskRef{resolved.string()};
      t.category = category_for(r, key);
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training mix

MixResult build_training_mix(const std::vector<TaskInstance>& instances, std::uint64_t seed,
                             const MixOptions& options) {
  if (options.seg_fraction < 0.0 || options.luna_factor < 0)
    throw SchemaError("seg_fraction and luna_factor must be non-negative");
  std::mt19937_64 rng(seed);
  MixResult result;

  std::vector<const TaskInstance*> luna;
  std::vector<const TaskInstance*> organ_seg;
  std::map<std::string, std::pair<std::vector<const TaskInstance*>, std::vector<const TaskInstance*>>>
      by_task;  // key -> (positives, negatives)
  std::vector<std::string> volumes;  // non-LUNA volumes in order of first appearance
  std::set<std::string, std::less<>> seen_volumes;

  for (const auto& inst : instances) {
    if (inst.dataset == options.luna_dataset) {
      luna.push_back(&inst);
      continue;
    }
    if (seen_volumes.insert(inst.volume_ref).second) volumes.push_back(inst.volume_ref);
    if (inst.is_segmentation()) {
      organ_seg.push_back(&inst);
    } else {
      auto& bucket = by_task[inst.task_key];
      (inst.label() == 1 ? bucket.first : bucket.second).push_back(&inst);
    }
  }

  std::vector<TaskInstance> out;
  for (auto& [key, bucket] : by_task) {
    auto& [pos, neg] = bucket;
    if (pos.empty()) {
      result.warnings.push_back("task '" + key + "' has no positive examples; dropped");
      continue;
    }
    for (auto* p : pos) out.push_back(*p);
    if (neg.size() <= pos.size()) {
      for (auto* n : neg) out.push_back(*n);
    } else {
      std::vector<std::size_t> idx(neg.size());
      std::iota(idx.begin(), idx.end(), 0);
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(pos.size());
      std::sort(idx.begin(), idx.end());
      for (auto i : idx) out.push_back(*neg[i]);
    }
  }

  // Extra organ segmentation instances.
  auto n_extra = static_cast<std::size_t>(
      std::floor(options.seg_fraction * static_cast<double>(volumes.size()) + 1e-9));
  std::vector<std::string> candidates;
  std::map<std::string, std::vector<const TaskInstance*>, std::less<>> seg_by_volume;
  for (auto* s : organ_seg) {
    auto& v = seg_by_volume[s->volume_ref];
    if (v.empty()) candidates.push_back(s->volume_ref);
    v.push_back(s);
  }
  if (n_extra > candidates.size()) {
    result.warnings.push_back("only " + std::to_string(candidates.size()) +
                              " volumes carry organ masks; wanted " + std::to_string(n_extra));
    n_extra = candidates.size();
  }
  std::shuffle(candidates.begin(), candidates.end(), rng);
  for (std::size_t i = 0; i < n_extra; ++i) {
    const auto& options_for_volume = seg_by_volume.at(candidates[i]);
    std::uniform_int_distribution<std::size_t> pick(0, options_for_volume.size() - 1);
    out.push_back(*options_for_volume[pick(rng)]);
  }

  for (auto* l : luna)
    for (int k = 0; k < options.luna_factor; ++k) out.push_back(*l);

  std::shuffle(out.begin(), out.end(), rng);
  result.instances = std::move(out);
  return result;
}

namespace {

json instance_to_json(const TaskInstance& t) {
  json j;
  j["volume"] = t.volume_ref;
  j["dataset"] = t.dataset;
  j["split"] = to_string(t.split);
  j["task_key"] = t.task_key;
  j["task"] = slots_to_json(t.task);
  j["category"] = to_string(t.category);
  if (t.is_segmentation())
    j["mask"] = t.mask_path();
  else
    j["label"] = t.label();
  return j;
}

TaskInstance instance_from_json(const json& j) {
  TaskInstance t;
  t.volume_ref = j.at("volume").get<std::string>();
  t.dataset = j.at("dataset").get<std::string>();
  t.split = parse_split(j.at("split").get<std::string>());
  t.task_key = j.at("task_key").get<std::string>();
  t.task = task_from_slots(t.task_key, j.at("task"));
  t.category = parse_category(j.at("category").get<std::string>());
  if (j.contains("mask"))
    t.target = MaskRef{j["mask"].get<std::string>()};
  else
    t.target = BinaryLabel{j.at("label").get<int>()};
  if (t.is_segmentation() != (t.task.kind == TaskKind::segmentation))
    throw SchemaError("instance for '" + t.task_key + "' has a target of the wrong kind");
  return t;
}

}  // namespace

void write_instances_jsonl(std::ostream& out, const std::vector<TaskInstance>& instances) {
  for (auto& t : instances) out << instance_to_json(t).dump() << '\n';
}

std::vector<TaskInstance> read_instances_jsonl(std::istream& in) {
  std::vector<TaskInstance> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(instance_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw SchemaError(std::string("bad instance record: ") + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

std::vector<std::string> Vocabulary::split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t capacity) {
  if (capacity < 2) throw SchemaError("vocabulary capacity must be at least 2");
  std::map<std::string, std::size_t> counts;
  for (auto& text : corpus)
    for (auto& w : split_words(text)) ++counts[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](auto& a, auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [w, _] : ranked) {
    if (words.size() + 2 >= capacity) break;
    words.push_back(w);
  }
  return from_words(std::move(words));
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  v.words_ = {"[PAD]", "[UNK]"};
  for (auto& w : words) {
    if (w == "[PAD]" || w == "[UNK]") continue;
    if (v.index_.contains(w)) continue;
    v.index_.emplace(w, static_cast<std::int32_t>(v.words_.size()));
    v.words_.push_back(std::move(w));
  }
  return v;
}

std::int32_t Vocabulary::id_of(std::string_view word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnkId : it->second;
}

TokenSequence Vocabulary::tokenize(std::string_view text, std::size_t max_length) const {
  auto words = split_words(text);
  if (words.empty()) throw SchemaError("cannot tokenize empty text");
  TokenSequence seq;
  for (auto& w : words) {
    if (seq.ids.size() >= max_length) break;
    seq.ids.push_back(id_of(w));
  }
  return seq;
}

}  // namespace ctvlm
