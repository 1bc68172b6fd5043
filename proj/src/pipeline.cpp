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

#include "ctvlm/pipeline.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include "ctvlm/checkpoint.hpp"
#include "ctvlm/maskpatch.hpp"
#include "ctvlm/serialize.hpp"
#include "ctvlm/volume.hpp"

namespace ctvlm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kLungTask = "seg_lungs";
constexpr std::size_t kMemoCapacity = 256;

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IngestionError(p.string(), "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw SchemaError("cannot write " + tmp.string());
    out << text;
    if (!out) throw SchemaError("failed writing " + tmp.string());
  }
  fs::rename(tmp, p);
}

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw SchemaError(p.string() + ": " + e.what());
  }
}

int env_workers() {
  const char* v = std::getenv("CTVLM_WORKERS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw SchemaError("CTVLM_WORKERS must be a positive integer");
  return static_cast<int>(std::min<long>(n, 256));
}

// Runs fn(i) for i in [0, n) on up to `workers` threads. Exceptions inside fn
// must be handled by fn.
template <class Fn>
void parallel_for(std::size_t n, int workers, Fn fn) {
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  for (auto& th : pool) th.join();
}

std::vector<TaskInstance> read_instances(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw SchemaError("cannot open " + p.string());
  return read_instances_jsonl(in);
}

void write_instances(const fs::path& p, const std::vector<TaskInstance>& v) {
  std::ostringstream ss;
  write_instances_jsonl(ss, v);
  write_text(p, ss.str());
}

std::string split_file(Split s) { return std::string(to_string(s)) + ".jsonl"; }

std::string sanitize(std::string_view s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.' ? c : '_';
  return out;
}

const TaskBank& bank_for(const RunConfig& config, TaskBank& storage) {
  if (!config.task_bank) return TaskBank::builtin();
  storage = TaskBank::load(config.path(*config.task_bank));
  return storage;
}

fs::path require_prepared(const RunConfig& config, const char* file) {
  auto p = config.run_dir / file;
  if (!fs::exists(p))
    throw SchemaError(p.string() + " not found; run `ctvlm prepare` on this run directory first");
  return p;
}

fs::path resolve_checkpoint(const RunConfig& config, const std::optional<fs::path>& checkpoint) {
  if (checkpoint) return config.path(*checkpoint);
  auto marker = config.run_dir / "best.json";
  if (!fs::exists(marker))
    throw SchemaError("no checkpoint given and " + marker.string() + " missing; run `ctvlm train` first");
  return config.run_dir / read_json(marker).at("checkpoint").get<std::string>();
}

Model<float> load_model_for(const RunConfig& config, const fs::path& path) {
  auto model = load_checkpoint(path);
  if (!(model.config().input_shape == config.frame.input_shape))
    throw SchemaError("checkpoint input shape " + to_string(model.config().input_shape) +
                      " does not match the frame " + to_string(config.frame.input_shape));
  return model;
}

struct RecordOutcome {
  enum { processed, reused, rejected } status = rejected;
  std::string key;
  std::string error;
};

RecordOutcome prepare_record(const ManifestRecord& r, const DatasetManifest& manifest, const RunConfig& config,
                             const std::string& frame_text) {
  RecordOutcome out;
  try {
    const auto image_path = manifest.resolve(r.volume);
    std::string material = "ctvlm-cache-v1\n" + frame_text + "\n" + sha256_hex(read_file(image_path)) + "\n";
    for (const auto& [task, mask] : r.masks)
      material += task + ":" + sha256_hex(read_file(manifest.resolve(mask))) + "\n";
    out.key = sha256_hex(material);

    const auto dir = config.run_dir / "cache" / out.key;
    if (fs::exists(dir / "image.json")) {
      out.status = RecordOutcome::reused;
      return out;
    }
    VolumeGrid image = load_volume(image_path);
    std::map<std::string, VolumeGrid> masks;
    for (const auto& [task, mask] : r.masks) {
      VolumeGrid m = load_volume(manifest.resolve(mask));
      if (!(m.dims == image.dims)) throw IngestionError(mask, "mask grid differs from the image grid");
      masks.emplace(task, std::move(m));
    }
    auto lung = masks.find(kLungTask);
    FramedCase framed = frame_case(image, masks, lung == masks.end() ? nullptr : &lung->second, config.frame);

    auto tmp = dir;
    tmp += ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    json warnings = framed.warnings;
    write_raw_volume(tmp / "image", framed.image, {{"volume", r.volume}, {"warnings", warnings.dump()}});
    for (const auto& [task, m] : framed.masks) write_raw_volume(tmp / ("mask." + task), m, {{"task", task}});
    std::error_code ec;
    fs::rename(tmp, dir, ec);
    if (ec) {
      fs::remove_all(tmp);
      if (!fs::exists(dir / "image.json")) throw IngestionError(r.volume, "cannot store cache: " + ec.message());
    }
    out.status = RecordOutcome::processed;
  } catch (const std::exception& e) {
    out.status = RecordOutcome::rejected;
    out.error = e.what();
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 failed");
  std::ostringstream ss;
  for (unsigned int i = 0; i < len; ++i) ss << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return ss.str();
}

fs::path RunConfig::path(const fs::path& p) const { return p.is_absolute() ? p : run_dir / p; }

void RunConfig::check() const {
  frame.check();
  model.check();
  train.check();
  if (!(model.input_shape == frame.input_shape)) throw SchemaError("model input shape must equal the frame input shape");
  if (manifests.empty()) throw SchemaError("no manifest configured");
  for (const auto& m : manifests)
    if (!fs::exists(path(m))) throw SchemaError("manifest " + path(m).string() + " does not exist");
  if (task_bank && !fs::exists(path(*task_bank)))
    throw SchemaError("task bank " + path(*task_bank).string() + " does not exist");
  if (mix.seg_fraction < 0.0 || mix.luna_factor < 1) throw SchemaError("invalid mix options");
}

RunConfig make_run_config(const fs::path& run_dir, const json& doc) {
  if (!doc.is_object()) throw SchemaError("run config must be a JSON object");
  RunConfig c;
  c.run_dir = run_dir;
  try {
    const auto preset = doc.value("preset", std::string("desk"));
    if (preset == "desk") {
      c.preset = Preset::desk;
      c.frame = FrameSpec::desk();
      c.model = ModelConfig::desk();
      c.train = TrainConfig::desk();
    } else if (preset == "paper") {
      c.preset = Preset::paper;
      c.frame = FrameSpec::paper();
      c.model = ModelConfig::paper();
      c.train = TrainConfig::paper();
    } else {
      throw SchemaError("unknown preset '" + preset + "' (expected desk or paper)");
    }
    c.seed = doc.value("seed", std::uint64_t{0});
    c.model.seed = c.seed;
    c.train.seed = c.seed;
    if (doc.contains("frame")) from_json(doc["frame"], c.frame);
    if (doc.contains("model")) from_json(doc["model"], c.model);
    if (doc.contains("train")) from_json(doc["train"], c.train);
    if (auto it = doc.find("mix"); it != doc.end()) {
      c.mix.seg_fraction = it->value("seg_fraction", c.mix.seg_fraction);
      c.mix.luna_factor = it->value("luna_factor", c.mix.luna_factor);
      c.mix.luna_dataset = it->value("luna_dataset", c.mix.luna_dataset);
    }
    c.model.input_shape = c.frame.input_shape;
    if (auto it = doc.find("manifests"); it != doc.end())
      for (const auto& m : *it) c.manifests.emplace_back(m.get<std::string>());
    if (auto it = doc.find("manifest"); it != doc.end()) c.manifests.emplace_back(it->get<std::string>());
    if (c.manifests.empty()) c.manifests.emplace_back("manifest.jsonl");
    if (auto it = doc.find("task_bank"); it != doc.end() && !it->is_null()) c.task_bank = it->get<std::string>();
    c.exclude_volumes = doc.value("exclude_volumes", std::vector<std::string>{});
  } catch (const json::exception& e) {
    throw SchemaError(std::string("bad run config: ") + e.what());
  }
  c.workers = env_workers();
  return c;
}

RunConfig load_run_config(const fs::path& run_dir, const std::optional<fs::path>& config_file,
                          const json& overrides) {
  json doc = json::object();
  if (config_file) {
    doc = read_json(*config_file);
  } else if (fs::exists(run_dir / "config.json")) {
    doc = read_json(run_dir / "config.json");
  }
  if (!doc.is_object()) throw SchemaError("run config must be a JSON object");
  doc.merge_patch(overrides);
  return make_run_config(run_dir, doc);
}

// ---------------------------------------------------------------------------

PrepareReport run_prepare(const RunConfig& config) {
  config.check();
  TaskBank storage;
  const TaskBank& bank = bank_for(config, storage);
  fs::create_directories(config.run_dir / "cache");

  const std::string frame_text = json(config.frame).dump();
  PrepareReport report;
  json index = json::object();
  std::ostringstream rejections;
  std::vector<TaskInstance> instances;

  for (const auto& mpath : config.manifests) {
    auto manifest = DatasetManifest::load(config.path(mpath)).excluding(config.exclude_volumes);
    manifest.validate(bank);
    std::vector<RecordOutcome> outcomes(manifest.records.size());
    parallel_for(manifest.records.size(), config.workers, [&](std::size_t i) {
      outcomes[i] = prepare_record(manifest.records[i], manifest, config, frame_text);
    });

    DatasetManifest accepted;
    accepted.base_dir = manifest.base_dir;
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      const auto& r = manifest.records[i];
      const auto& o = outcomes[i];
      ++report.records;
      if (o.status == RecordOutcome::rejected) {
        ++report.rejected;
        rejections << json{{"volume", r.volume}, {"dataset", r.dataset}, {"error", o.error}}.dump() << "\n";
        continue;
      }
      ++(o.status == RecordOutcome::processed ? report.processed : report.reused);
      index[manifest.resolve(r.volume).string()] = o.key;
      accepted.records.push_back(r);
    }
    auto part = decompose_dataset(accepted, bank);
    instances.insert(instances.end(), part.begin(), part.end());
  }
  write_text(config.run_dir / "rejections.jsonl", rejections.str());
  if (report.records > 0 && report.rejected == report.records)
    throw IngestionError("manifest", "all " + std::to_string(report.records) +
                                         " records failed; see " + (config.run_dir / "rejections.jsonl").string());

  std::map<Split, std::vector<TaskInstance>> by_split;
  for (auto& inst : instances) by_split[inst.split].push_back(inst);
  for (Split s : {Split::train, Split::val, Split::test}) write_instances(config.run_dir / split_file(s), by_split[s]);

  auto mix = build_training_mix(by_split[Split::train], config.seed, config.mix);
  write_instances(config.run_dir / "mix.jsonl", mix.instances);
  report.mix_size = mix.instances.size();
  report.warnings = mix.warnings;

  const auto vocab = Vocabulary::build(bank.corpus());
  json prepared{{"seed", config.seed},
                {"frame", config.frame},
                {"cache", index},
                {"vocabulary", vocab.words()},
                {"mix_size", mix.instances.size()},
                {"mix_warnings", mix.warnings}};
  write_text(config.run_dir / "prepared.json", prepared.dump(2));
  return report;
}

// ---------------------------------------------------------------------------

CacheSampleSource::CacheSampleSource(const RunConfig& config, Vocabulary vocab,
                                     std::map<std::string, std::string> cache_keys)
    : config_(config), vocab_(std::move(vocab)), keys_(std::move(cache_keys)) {}

CacheSampleSource CacheSampleSource::open(const RunConfig& config) {
  auto prepared = read_json(require_prepared(config, "prepared.json"));
  FrameSpec frame;
  from_json(prepared.at("frame"), frame);
  if (json(frame) != json(config.frame))
    throw SchemaError("the cache was prepared with a different frame; rerun `ctvlm prepare`");
  auto words = prepared.at("vocabulary").get<std::vector<std::string>>();
  auto keys = prepared.at("cache").get<std::map<std::string, std::string>>();
  return CacheSampleSource(config, Vocabulary::from_words(std::move(words)), std::move(keys));
}

VolumeGrid CacheSampleSource::load(const std::string& volume_ref, const std::string& item) const {
  auto it = keys_.find(volume_ref);
  if (it == keys_.end()) throw SchemaError("volume " + volume_ref + " is not in the prepared cache");
  const std::string memo_key = it->second + "/" + item;
  {
    std::lock_guard lock(mutex_);
    if (auto m = memo_.find(memo_key); m != memo_.end()) return m->second;
  }
  const auto stem = config_.run_dir / "cache" / it->second / item;
  if (!fs::exists(fs::path(stem).concat(".json")))
    throw SchemaError("cache entry " + stem.string() + " missing; rerun `ctvlm prepare`");
  VolumeGrid v = read_raw_volume(stem);
  std::lock_guard lock(mutex_);
  if (memo_.size() >= kMemoCapacity) memo_.clear();
  memo_.emplace(memo_key, v);
  return v;
}

Sample CacheSampleSource::fetch(const TaskInstance& instance, std::optional<std::uint64_t> augment_seed) const {
  Sample s;
  VolumeGrid image = load(instance.volume_ref, "image");
  std::optional<AugmentParams> aug;
  if (augment_seed) {
    aug = sample_augment(*augment_seed, config_.train.augmentation);
    image = apply_augment(image, *aug, Interp::trilinear, kAirHu);
  }
  s.input = finalize_input(image, config_.frame).data;
  s.ids = vocab_.tokenize(instance.task.rendered, static_cast<std::size_t>(config_.model.max_text_length)).ids;
  if (instance.is_segmentation()) {
    VolumeGrid mask = load(instance.volume_ref, "mask." + instance.task_key);
    if (aug) mask = apply_augment(mask, *aug, Interp::nearest, 0.0f);
    s.target = BatchItemTarget::segmentation(
        patchify_mask(finalize_mask(mask, config_.frame), config_.model.downsample, config_.model.intermediate));
  } else {
    s.target = BatchItemTarget::classification(instance.label());
  }
  return s;
}

// ---------------------------------------------------------------------------

TrainReport run_train(const RunConfig& config) {
  config.check();
  require_prepared(config, "mix.jsonl");
  auto source = CacheSampleSource::open(config);
  if (source.vocabulary().size() > static_cast<std::size_t>(config.model.vocab_size))
    throw SchemaError("model vocab_size " + std::to_string(config.model.vocab_size) + " is smaller than the vocabulary (" +
                      std::to_string(source.vocabulary().size()) + ")");
  const auto mix = read_instances(config.run_dir / "mix.jsonl");
  std::vector<TaskInstance> validation;
  for (auto& inst : read_instances(require_prepared(config, "val.jsonl")))
    if (!inst.is_segmentation()) validation.push_back(std::move(inst));

  TrainReport report;
  if (validation.empty()) report.warnings.push_back("validation split has no classification instances");

  const auto ckpt_dir = config.run_dir / "checkpoints";
  fs::remove_all(ckpt_dir);
  fs::create_directories(ckpt_dir);
  std::ofstream metrics(config.run_dir / "metrics.jsonl", std::ios::trunc);
  if (!metrics) throw SchemaError("cannot write metrics.jsonl");

  Model<float> model(config.model);
  auto sink = [&](const Model<float>& m, const MetricRecord& rec) {
    save_checkpoint(ckpt_dir / ("step_" + std::to_string(rec.step) + ".ckpt"), m, rec.step, rec.val_auroc_mean);
    metrics << rec.to_json() << "\n" << std::flush;
  };
  auto result = train(model, mix, validation, source, config.train, sink);
  report.warnings.insert(report.warnings.end(), result.warnings.begin(), result.warnings.end());
  if (result.log.empty()) throw SelectionError("training produced no metric records");

  try {
    report.best_index = select_checkpoint(result.log);
  } catch (const SelectionError&) {
    report.best_index = result.log.size() - 1;
    report.warnings.push_back("no validation AUROC available; selecting the final checkpoint");
  }
  const auto& best = result.log[report.best_index];
  report.best_step = best.step;
  report.best_val_auroc = best.val_auroc_mean;
  report.best_checkpoint = ckpt_dir / ("step_" + std::to_string(best.step) + ".ckpt");
  json marker{{"checkpoint", fs::relative(report.best_checkpoint, config.run_dir).string()},
              {"step", best.step},
              {"val_auroc_mean", best.val_auroc_mean ? json(*best.val_auroc_mean) : json(nullptr)},
              {"warnings", report.warnings}};
  write_text(config.run_dir / "best.json", marker.dump(2) + "\n");
  return report;
}

EvalReport run_eval(const RunConfig& config, const std::optional<fs::path>& checkpoint, Split split) {
  const auto ckpt = resolve_checkpoint(config, checkpoint);
  auto model = load_model_for(config, ckpt);
  auto source = CacheSampleSource::open(config);
  TaskBank storage;
  const TaskBank& bank = bank_for(config, storage);

  std::vector<TaskInstance> instances;
  for (auto& inst : read_instances(require_prepared(config, split_file(split).c_str()))) {
    if (!bank.contains(inst.task_key)) throw SchemaError("task '" + inst.task_key + "' is not in the task bank");
    if (!inst.is_segmentation()) instances.push_back(std::move(inst));
  }
  std::vector<ScoredInstance> scored(instances.size());
  std::vector<std::string> errors(instances.size());
  parallel_for(instances.size(), config.workers, [&](std::size_t i) {
    try {
      const auto& inst = instances[i];
      Sample s = source.fetch(inst, std::nullopt);
      scored[i] = {inst.task_key, inst.dataset, inst.category, inst.label(),
                   static_cast<double>(model.forward(s.input, s.ids).cls_logit)};
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (const auto& e : errors)
    if (!e.empty()) throw Error("evaluation failed: " + e);

  auto report = build_eval_report(scored, ckpt.stem().string());
  fs::create_directories(config.run_dir / "eval");
  const std::string name(to_string(split));
  write_text(config.run_dir / "eval" / (name + ".json"), report.to_json() + "\n");
  write_text(config.run_dir / "eval" / (name + ".txt"), report.to_table());
  return report;
}

std::size_t run_export_seg(const RunConfig& config, const std::optional<fs::path>& checkpoint, Split split) {
  const auto ckpt = resolve_checkpoint(config, checkpoint);
  auto model = load_model_for(config, ckpt);
  auto source = CacheSampleSource::open(config);
  const auto& mc = model.config();
  const auto out_dir = config.run_dir / "export" / std::string(to_string(split));
  fs::create_directories(out_dir);

  std::size_t written = 0;
  for (const auto& inst : read_instances(require_prepared(config, split_file(split).c_str()))) {
    if (!inst.is_segmentation()) continue;
    Sample s = source.fetch(inst, std::nullopt);
    auto out = model.forward(s.input, s.ids);
    auto target = threshold_logits(out.seg_logits, mc.token_grid(), mc.downsample, mc.intermediate);
    VolumeGrid mask = unpack_mask(target, mc.token_grid());
    const double cell = static_cast<double>(mc.downsample) / mc.intermediate;
    const auto crop = config.frame.crop_voxels();
    mask.spacing = {config.frame.voxel_mm * crop.x / mc.input_shape.x * cell,
                    config.frame.voxel_mm * crop.y / mc.input_shape.y * cell,
                    config.frame.voxel_mm * crop.z / mc.input_shape.z * cell};
    const auto stem = out_dir / (sanitize(fs::path(inst.volume_ref).filename().string()) + "__" + inst.task_key);
    write_raw_volume(stem, mask,
                     {{"volume", inst.volume_ref},
                      {"task", inst.task_key},
                      {"d", std::to_string(mc.downsample)},
                      {"u", std::to_string(mc.intermediate)}});
    ++written;
  }
  return written;
}

}  // namespace ctvlm
