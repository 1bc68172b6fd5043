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

// Run-directory pipeline behind the command-line tool.
//
//   <run>/config.json          optional; see load_run_config
//   <run>/cache/<key>/         framed image and masks per volume
//   <run>/prepared.json        volume -> cache key index, vocabulary, seed
//   <run>/rejections.jsonl     records that failed to prepare
//   <run>/mix.jsonl            shuffled training mix
//   <run>/val.jsonl, test.jsonl
//   <run>/checkpoints/step_<n>.ckpt
//   <run>/metrics.jsonl        one MetricRecord per validation
//   <run>/best.json            marker written after checkpoint selection
//   <run>/eval/<split>.json, <split>.txt
//   <run>/export/<split>/      predicted segmentation masks

#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "ctvlm/metrics.hpp"
#include "ctvlm/model.hpp"
#include "ctvlm/taskbank.hpp"
#include "ctvlm/trainer.hpp"
#include "ctvlm/volprep.hpp"

namespace ctvlm {

enum class Preset { desk, paper };

struct RunConfig {
  std::filesystem::path run_dir;
  std::vector<std::filesystem::path> manifests;
  std::optional<std::filesystem::path> task_bank;  // builtin bank when absent
  std::vector<std::string> exclude_volumes;
  Preset preset = Preset::desk;
  std::uint64_t seed = 0;
  FrameSpec frame;
  ModelConfig model;
  TrainConfig train;
  MixOptions mix;
  int workers = 1;

  // Relative paths resolve against run_dir.
  std::filesystem::path path(const std::filesystem::path& p) const;
  void check() const;
};

// Starts from the preset named in the file (or overrides), applies the
// file's "frame", "model", "train" and "mix" objects, then `overrides` with
// the same layout. A top-level "seed" seeds the model, the mix and training
// unless those sections set their own. The model input shape always follows
// the frame. Workers come from CTVLM_WORKERS, defaulting to 1.
RunConfig load_run_config(const std::filesystem::path& run_dir,
                          const std::optional<std::filesystem::path>& config_file,
                          const nlohmann::json& overrides = nlohmann::json::object());
RunConfig make_run_config(const std::filesystem::path& run_dir, const nlohmann::json& doc);

struct PrepareReport {
  std::size_t records = 0;
  std::size_t processed = 0;
  std::size_t reused = 0;
  std::size_t rejected = 0;
  std::size_t mix_size = 0;
  std::vector<std::string> warnings;
};

// Frames every record into the cache (skipping records whose content key is
// already cached), writes the rejection report, the split files and the
// training mix. Throws IngestionError when every record fails.
PrepareReport run_prepare(const RunConfig& config);

struct TrainReport {
  std::size_t best_index = 0;
  int best_step = 0;
  std::optional<double> best_val_auroc;
  std::filesystem::path best_checkpoint;
  std::vector<std::string> warnings;
};

TrainReport run_train(const RunConfig& config);

// Scores every classification instance of `split` with the checkpoint (the
// selected best one when absent) and writes eval/<split>.json and .txt.
EvalReport run_eval(const RunConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                    Split split);

// Writes thresholded, unpacked segmentation predictions for every
// segmentation instance of `split`. Returns the number of masks written.
std::size_t run_export_seg(const RunConfig& config, const std::optional<std::filesystem::path>& checkpoint,
                           Split split);

// SHA-256 hex digest.
std::string sha256_hex(std::string_view bytes);

// Reads prepared volumes from a run cache.
class CacheSampleSource : public SampleSource {
 public:
  CacheSampleSource(const RunConfig& config, Vocabulary vocab,
                    std::map<std::string, std::string> cache_keys);
  static CacheSampleSource open(const RunConfig& config);

  Sample fetch(const TaskInstance& instance, std::optional<std::uint64_t> augment_seed) const override;
  const Vocabulary& vocabulary() const { return vocab_; }

 private:
  VolumeGrid load(const std::string& volume_ref, const std::string& item) const;

  RunConfig config_;
  Vocabulary vocab_;
  std::map<std::string, std::string> keys_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::string, VolumeGrid> memo_;
};

}  // namespace ctvlm
