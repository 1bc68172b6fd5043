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

// Python bindings. Volumes cross the boundary as float32 arrays of shape
// (z, y, x), which matches the x-fastest layout used throughout.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "ctvlm/checkpoint.hpp"
#include "ctvlm/losses.hpp"
#include "ctvlm/maskpatch.hpp"
#include "ctvlm/metrics.hpp"
#include "ctvlm/model.hpp"
#include "ctvlm/pipeline.hpp"
#include "ctvlm/taskbank.hpp"
#include "ctvlm/trainer.hpp"
#include "ctvlm/volprep.hpp"
#include "ctvlm/volume.hpp"

namespace py = pybind11;
using namespace ctvlm;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

VolumeGrid to_grid(const FloatArray& a, std::array<double, 3> spacing) {
  if (a.ndim() != 3) throw ShapeError("expected a 3-D array of shape (z, y, x)");
  VolumeGrid g(Dims3{static_cast<int>(a.shape(2)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0))},
               spacing);
  std::copy(a.data(), a.data() + a.size(), g.data.begin());
  return g;
}

FloatArray to_array(const VolumeGrid& g) {
  FloatArray a({g.dims.z, g.dims.y, g.dims.x});
  std::copy(g.data.begin(), g.data.end(), a.mutable_data());
  return a;
}

ScoredSet scored(const std::vector<double>& scores, const std::vector<int>& labels) {
  ScoredSet s{scores, labels};
  s.check();
  return s;
}

ModelConfig preset_config(const std::string& name, std::uint64_t seed) {
  ModelConfig c;
  if (name == "desk")
    c = ModelConfig::desk();
  else if (name == "paper")
    c = ModelConfig::paper();
  else if (name == "tiny")
    c = ModelConfig::tiny();
  else
    throw SchemaError("unknown model preset '" + name + "'");
  c.seed = seed;
  return c;
}

FrameSpec frame_preset(const std::string& name) {
  if (name == "desk") return FrameSpec::desk();
  if (name == "paper") return FrameSpec::paper();
  throw SchemaError("unknown frame preset '" + name + "'");
}

const Vocabulary& builtin_vocabulary() {
  static const Vocabulary v = Vocabulary::build(TaskBank::builtin().corpus());
  return v;
}

RunConfig run_config(const std::filesystem::path& run_dir, const std::optional<std::filesystem::path>& config,
                     const std::string& overrides_json) {
  return load_run_config(run_dir, config, nlohmann::json::parse(overrides_json));
}

class PyModel {
 public:
  explicit PyModel(Model<float> m) : model_(std::move(m)) {}

  py::tuple forward(const FloatArray& input, const std::vector<std::int32_t>& ids) const {
    const auto& c = model_.config();
    if (input.size() != static_cast<py::ssize_t>(c.input_shape.count()))
      throw ShapeError("input must have shape (z, y, x) = (" + std::to_string(c.input_shape.z) + ", " +
                       std::to_string(c.input_shape.y) + ", " + std::to_string(c.input_shape.x) + ")");
    ModelOutput<float> out;
    {
      py::gil_scoped_release release;
      out = model_.forward(std::span<const float>(input.data(), static_cast<std::size_t>(input.size())), ids);
    }
    const auto u3 = static_cast<py::ssize_t>(c.intermediate) * c.intermediate * c.intermediate;
    FloatArray seg({static_cast<py::ssize_t>(c.tokens()), u3});
    std::copy(out.seg_logits.begin(), out.seg_logits.end(), seg.mutable_data());
    return py::make_tuple(out.cls_logit, seg);
  }

  py::dict config() const {
    const auto& c = model_.config();
    py::dict d;
    d["input_shape"] = py::make_tuple(c.input_shape.z, c.input_shape.y, c.input_shape.x);
    d["downsample"] = c.downsample;
    d["intermediate"] = c.intermediate;
    d["hidden"] = c.hidden;
    d["heads"] = c.heads;
    d["layers"] = c.layers;
    d["max_text_length"] = c.max_text_length;
    d["vocab_size"] = c.vocab_size;
    d["tokens"] = c.tokens();
    return d;
  }

  std::size_t parameter_count() const { return model_.params().total_count(); }

 private:
  Model<float> model_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Vision-language CT classification and segmentation core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<IngestionError>(m, "IngestionError", base.ptr());
  py::register_exception<NumericFault>(m, "NumericFault", base.ptr());

  // Task bank and text.
  m.def("task_keys", [] {
    std::vector<std::string> keys;
    for (const auto& [k, _] : TaskBank::builtin().tasks()) keys.push_back(k);
    return keys;
  });
  m.def("task_description", [](const std::string& key) { return TaskBank::builtin().at(key).rendered; },
        py::arg("key"));
  m.def("tokenize",
        [](const std::string& text, std::size_t max_length) { return builtin_vocabulary().tokenize(text, max_length).ids; },
        py::arg("text"), py::arg("max_length") = 16);

  // Volumes.
  m.def("load_volume",
        [](const std::filesystem::path& path) {
          auto g = load_volume(path);
          return py::make_tuple(to_array(g), py::make_tuple(g.spacing[0], g.spacing[1], g.spacing[2]));
        },
        py::arg("path"), "Returns (array of shape (z, y, x), spacing (x, y, z) in mm).");
  m.def("prepare_input",
        [](const FloatArray& image, std::array<double, 3> spacing, std::optional<FloatArray> lung_mask,
           const std::string& preset) {
          const auto frame = frame_preset(preset);
          auto raw = to_grid(image, spacing);
          std::optional<VolumeGrid> lung;
          if (lung_mask) lung = to_grid(*lung_mask, spacing);
          auto framed = frame_case(raw, {}, lung ? &*lung : nullptr, frame);
          return py::make_tuple(to_array(finalize_input(framed.image, frame)), framed.warnings);
        },
        py::arg("image"), py::arg("spacing"), py::arg("lung_mask") = py::none(), py::arg("preset") = "desk",
        "Frames a raw HU volume and returns (model input (z, y, x), warnings).");

  // Segmentation targets.
  m.def("patchify_mask",
        [](const FloatArray& mask, int d, int u) {
          auto t = patchify_mask(to_grid(mask, {1, 1, 1}), d, u);
          ByteArray out({static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())});
          std::copy(t.values.begin(), t.values.end(), out.mutable_data());
          return out;
        },
        py::arg("mask"), py::arg("d"), py::arg("u"));
  m.def("unpack_mask",
        [](const ByteArray& target, std::array<int, 3> grid_zyx, int d, int u) {
          PatchTarget t;
          t.d = d;
          t.u = u;
          t.grid = {grid_zyx[2], grid_zyx[1], grid_zyx[0]};
          if (target.size() != static_cast<py::ssize_t>(t.rows() * t.cols()))
            throw ShapeError("target size does not match grid and u");
          t.values.assign(target.data(), target.data() + target.size());
          return to_array(unpack_mask(t, t.grid));
        },
        py::arg("target"), py::arg("grid"), py::arg("d"), py::arg("u"));

  // Losses and schedule.
  m.def("focal_loss",
        [](const std::vector<double>& logits, const std::vector<std::uint8_t>& target, std::optional<double> alpha,
           double gamma, double scale) {
          PatchTarget t;
          t.grid = {static_cast<int>(target.size()), 1, 1};
          t.values = target;
          return focal_loss<double>(logits, t, FocalParams{alpha, gamma, scale});
        },
        py::arg("logits"), py::arg("target"), py::arg("alpha") = 0.25, py::arg("gamma") = 2.0,
        py::arg("scale") = 10.0);
  m.def("lr_schedule",
        [](int step, int total_steps, int warmup_steps, double base_lr) {
          TrainConfig c;
          c.total_steps = total_steps;
          c.warmup_steps = warmup_steps;
          c.base_lr = base_lr;
          return lr_schedule(step, c);
        },
        py::arg("step"), py::arg("total_steps"), py::arg("warmup_steps"), py::arg("base_lr"));

  // Metrics.
  m.def("auroc", [](const std::vector<double>& s, const std::vector<int>& y) { return auroc(scored(s, y)); },
        py::arg("scores"), py::arg("labels"));
  m.def("aupr", [](const std::vector<double>& s, const std::vector<int>& y) { return aupr(scored(s, y)); },
        py::arg("scores"), py::arg("labels"));
  m.def("delong_ci",
        [](const std::vector<double>& s, const std::vector<int>& y, double level) {
          auto r = delong_ci(scored(s, y), level);
          py::dict d;
          d["auc"] = r.auc;
          d["variance"] = r.variance;
          d["low"] = r.low;
          d["high"] = r.high;
          return d;
        },
        py::arg("scores"), py::arg("labels"), py::arg("level") = 0.95);
  m.def("delong_paired_pvalue",
        [](const std::vector<double>& a, const std::vector<double>& b, const std::vector<int>& y) {
          return delong_paired_pvalue(scored(a, y), scored(b, y));
        },
        py::arg("scores_a"), py::arg("scores_b"), py::arg("labels"));

  // Model.
  py::class_<PyModel>(m, "Model")
      .def(py::init([](const std::string& preset, std::uint64_t seed) {
             return PyModel(Model<float>(preset_config(preset, seed)));
           }),
           py::arg("preset") = "desk", py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& path) { return PyModel(load_checkpoint(path)); },
                  py::arg("path"))
      .def("forward", &PyModel::forward, py::arg("input"), py::arg("ids"),
           "Returns (classification logit, segmentation logits of shape (tokens, u^3)).")
      .def_property_readonly("config", &PyModel::config)
      .def_property_readonly("parameter_count", &PyModel::parameter_count);

  // Run-directory pipeline. `overrides` is a JSON object string.
  m.def("prepare",
        [](const std::filesystem::path& run_dir, std::optional<std::filesystem::path> config,
           const std::string& overrides) {
          auto r = run_prepare(run_config(run_dir, config, overrides));
          py::dict d;
          d["records"] = r.records;
          d["processed"] = r.processed;
          d["reused"] = r.reused;
          d["rejected"] = r.rejected;
          d["mix_size"] = r.mix_size;
          d["warnings"] = r.warnings;
          return d;
        },
        py::arg("run_dir"), py::arg("config") = py::none(), py::arg("overrides") = "{}");
  m.def("train",
        [](const std::filesystem::path& run_dir, std::optional<std::filesystem::path> config,
           const std::string& overrides) {
          auto cfg = run_config(run_dir, config, overrides);
          TrainReport r;
          {
            py::gil_scoped_release release;
            r = run_train(cfg);
          }
          py::dict d;
          d["best_step"] = r.best_step;
          d["best_val_auroc"] = r.best_val_auroc;
          d["best_checkpoint"] = r.best_checkpoint;
          d["warnings"] = r.warnings;
          return d;
        },
        py::arg("run_dir"), py::arg("config") = py::none(), py::arg("overrides") = "{}");
  m.def("evaluate",
        [](const std::filesystem::path& run_dir, const std::string& split,
           std::optional<std::filesystem::path> checkpoint, std::optional<std::filesystem::path> config,
           const std::string& overrides) {
          auto cfg = run_config(run_dir, config, overrides);
          return run_eval(cfg, checkpoint, parse_split(split)).to_json();
        },
        py::arg("run_dir"), py::arg("split") = "test", py::arg("checkpoint") = py::none(),
        py::arg("config") = py::none(), py::arg("overrides") = "{}", "Returns the report as a JSON string.");
  m.def("export_seg",
        [](const std::filesystem::path& run_dir, const std::string& split,
           std::optional<std::filesystem::path> checkpoint, std::optional<std::filesystem::path> config,
           const std::string& overrides) {
          return run_export_seg(run_config(run_dir, config, overrides), checkpoint, parse_split(split));
        },
        py::arg("run_dir"), py::arg("split") = "test", py::arg("checkpoint") = py::none(),
        py::arg("config") = py::none(), py::arg("overrides") = "{}");
}
