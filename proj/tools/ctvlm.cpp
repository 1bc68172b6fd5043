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

// ctvlm: prepare, train, eval and export-seg over a run directory.

#include <iostream>

#include "CLI11.hpp"
#include "ctvlm/pipeline.hpp"

namespace {

struct Common {
  std::string run_dir = ".";
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<int> val_interval;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--run-dir", c.run_dir, "Run directory; relative paths resolve against it")->capture_default_str();
  cmd->add_option("--config", c.config, "Run config JSON (default: <run-dir>/config.json when present)");
  cmd->add_option("--preset", c.preset, "Scale preset")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seed", c.seed, "Seed for the mix, model initialisation and training");
  cmd->add_option("--steps", c.steps, "Training steps");
  cmd->add_option("--batch-size", c.batch_size, "Batch size");
  cmd->add_option("--lr", c.lr, "Base learning rate");
  cmd->add_option("--val-interval", c.val_interval, "Steps between validations");
}

ctvlm::RunConfig resolve(const Common& c) {
  nlohmann::json o = nlohmann::json::object();
  if (!c.preset.empty()) o["preset"] = c.preset;
  if (c.seed) o["seed"] = *c.seed;
  if (c.steps) o["train"]["total_steps"] = *c.steps;
  if (c.batch_size) o["train"]["batch_size"] = *c.batch_size;
  if (c.lr) o["train"]["base_lr"] = *c.lr;
  if (c.val_interval) o["train"]["val_interval"] = *c.val_interval;
  std::optional<std::filesystem::path> file;
  if (!c.config.empty()) file = c.config;
  return ctvlm::load_run_config(c.run_dir, file, o);
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-conditioned CT vision-language model: data preparation, training and evaluation"};
  app.require_subcommand(1);

  Common common;
  std::string checkpoint;
  std::string split = "test";

  auto* prepare = app.add_subcommand("prepare", "Frame volumes into the cache and write the task mix");
  add_common(prepare, common);
  auto* train = app.add_subcommand("train", "Train on the prepared mix and select the best checkpoint");
  add_common(train, common);
  auto* eval = app.add_subcommand("eval", "Score a split and write the evaluation report");
  add_common(eval, common);
  auto* exp = app.add_subcommand("export-seg", "Write predicted segmentation masks for a split");
  add_common(exp, common);
  for (auto* cmd : {eval, exp}) {
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint file (default: the one in best.json)");
    cmd->add_option("--split", split, "Split to score")->check(CLI::IsMember({"train", "val", "test"}))->capture_default_str();
  }

  CLI11_PARSE(app, argc, argv);

  try {
    const auto config = resolve(common);
    std::optional<std::filesystem::path> ckpt;
    if (!checkpoint.empty()) ckpt = checkpoint;

    if (prepare->parsed()) {
      auto r = ctvlm::run_prepare(config);
      print_warnings(r.warnings);
      std::cout << "prepared " << r.records << " records: " << r.processed << " processed, " << r.reused
                << " cached, " << r.rejected << " rejected; mix of " << r.mix_size << " instances\n";
    } else if (train->parsed()) {
      auto r = ctvlm::run_train(config);
      print_warnings(r.warnings);
      std::cout << "best checkpoint " << r.best_checkpoint.string() << " (step " << r.best_step;
      if (r.best_val_auroc) std::cout << ", val AUROC " << *r.best_val_auroc;
      std::cout << ")\n";
    } else if (eval->parsed()) {
      auto report = ctvlm::run_eval(config, ckpt, ctvlm::parse_split(split));
      print_warnings(report.warnings);
      std::cout << report.to_table();
    } else if (exp->parsed()) {
      auto n = ctvlm::run_export_seg(config, ckpt, ctvlm::parse_split(split));
      std::cout << "wrote " << n << " masks to " << (config.run_dir / "export" / split).string() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
