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

// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "ctvlm/gradcheck.hpp"
#include "ctvlm/losses.hpp"
#include "ctvlm/maskpatch.hpp"
#include "ctvlm/metrics.hpp"
#include "ctvlm/model.hpp"
#include "ctvlm/taskbank.hpp"
#include "ctvlm/trainer.hpp"
#include "ctvlm/volprep.hpp"
#include "memory_source.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace ctvlm;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::vector<double> normal_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

double naive_bce(double z, int y) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  return -(y * std::log(p) + (1 - y) * std::log(1.0 - p));
}

// Direct transcription of the scaled, alpha-weighted focal loss.
double naive_focal(const std::vector<double>& z, const PatchTarget& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z[i]));
    const bool pos = t.values[i] != 0;
    const double pt = pos ? p : 1.0 - p;
    const double at = pos ? 0.25 : 0.75;
    s += -at * (1.0 - pt) * (1.0 - pt) * std::log(pt);
  }
  return 10.0 * s / static_cast<double>(z.size());
}

VolumeGrid brute_pool(const VolumeGrid& m, int w) {
  VolumeGrid out(Dims3{m.dims.x / w, m.dims.y / w, m.dims.z / w}, {1, 1, 1});
  for (int z = 0; z < m.dims.z; ++z)
    for (int y = 0; y < m.dims.y; ++y)
      for (int x = 0; x < m.dims.x; ++x)
        if (m.at(x, y, z) > 0.5f) out.at(x / w, y / w, z / w) = 1.0f;
  return out;
}

TaskInstance make_instance(const std::string& volume, const std::string& dataset, const std::string& key,
                           std::optional<int> label) {
  TaskInstance t;
  t.volume_ref = volume;
  t.dataset = dataset;
  t.task_key = key;
  t.task = TaskBank::builtin().at(key);
  if (label)
    t.target = BinaryLabel{*label};
  else
    t.target = MaskRef{volume + "." + key};
  return t;
}

// Tiny double-precision model with one classification and one segmentation
// item.
struct TinyProblem {
  Model<double> model{ModelConfig::tiny()};
  std::vector<double> x1, x2;
  std::vector<std::int32_t> ids1{3, 4, 0, 5}, ids2{6, 7};
  PatchTarget target;

  TinyProblem() {
    std::mt19937_64 rng(11);
    x1 = normal_vector(512, rng);
    x2 = normal_vector(512, rng);
    const auto& c = model.config();
    VolumeGrid mask(c.input_shape, {1, 1, 1});
    for (auto& v : mask.data) v = (rng() % 3 == 0) ? 1.0f : 0.0f;
    target = patchify_mask(mask, c.downsample, c.intermediate);
  }

  // The small-scale initialisation leaves attention nearly uniform and many
  // gradients near 1e-9, below what central differences resolve.
  void perturb(double sigma, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, sigma);
    for (auto& p : model.params())
      for (auto& v : p.value) v += g(rng);
  }

  double loss(bool with_grad) {
    auto c1 = model.make_cache(), c2 = model.make_cache();
    auto o1 = model.forward(x1, ids1, c1.get());
    auto o2 = model.forward(x2, ids2, c2.get());
    std::vector<ItemOutputs<double>> outs{{o1.cls_logit, o1.seg_logits}, {o2.cls_logit, o2.seg_logits}};
    std::vector<BatchItemTarget> tgts{BatchItemTarget::classification(1), BatchItemTarget::segmentation(target)};
    auto bl = batch_loss<double>(outs, tgts);
    if (with_grad) {
      model.backward(*c1, bl.d_cls[0], bl.d_seg[0]);
      model.backward(*c2, bl.d_cls[1], bl.d_seg[1]);
    }
    return bl.loss;
  }
};

Outcome gradient_correctness() {
  TinyProblem p;
  p.perturb(0.3, 17);
  const auto& c = p.model.config();
  const bool shape_ok = c.input_shape == Dims3{8, 8, 8} && c.hidden == 16;
  const auto t0 = Clock::now();
  auto report = grad_check(p.model.params(), [&](bool g) { return p.loss(g); }, {}, 1e-4,
                           std::numeric_limits<std::size_t>::max());
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << report.checked << " coordinates, max rel error " << report.max_rel_error << " (" << report.worst << "), "
     << secs << " s";
  return {shape_ok && report.checked == p.model.params().total_count() && report.max_rel_error < 1e-4 &&
              secs < 120.0,
          os.str()};
}

Outcome patchify_oracle() {
  std::mt19937_64 rng(2025);
  const std::pair<int, int> configs[] = {{4, 2}, {4, 4}, {8, 4}};
  int masks = 0, mismatches = 0;
  for (int i = 0; i < 200; ++i) {
    const auto [d, u] = configs[i % 3];
    std::uniform_int_distribution<int> side(1, 16 / d);
    Dims3 dims{side(rng) * d, side(rng) * d, side(rng) * d};
    std::bernoulli_distribution on(i % 4 == 0 ? 0.02 : 0.3);
    VolumeGrid m(dims, {1, 1, 1});
    for (auto& v : m.data) v = on(rng) ? 1.0f : 0.0f;
    auto t = patchify_mask(m, d, u);
    auto back = unpack_mask(t, t.grid);
    auto ref = brute_pool(m, d / u);
    const bool shape_ok = t.rows() == dims.count() / static_cast<std::size_t>(d * d * d) &&
                          t.cols() == static_cast<std::size_t>(u * u * u) && t.values.size() == t.rows() * t.cols();
    if (!shape_ok || back.dims != ref.dims || back.data != ref.data) ++mismatches;
    ++masks;
  }
  return {mismatches == 0, std::to_string(masks) + " masks, " + std::to_string(mismatches) + " mismatches"};
}

Outcome token_count() {
  auto cfg = ModelConfig::desk();
  const auto vocab = Vocabulary::build(TaskBank::builtin().corpus());
  std::vector<std::int32_t> ids;
  std::string text;
  for (const auto& [key, task] : TaskBank::builtin().tasks()) {
    auto tok = vocab.tokenize(task.rendered, static_cast<std::size_t>(cfg.max_text_length));
    if (tok.length() == 6) {
      ids = tok.ids;
      text = task.rendered;
      break;
    }
  }
  if (ids.empty()) return {false, "no six-token description in the task bank"};
  Model<float> model(cfg);
  std::vector<float> x(cfg.input_shape.count(), 0.1f);
  auto state = model.encode(x, ids);
  VolumeGrid mask(cfg.input_shape, {1, 1, 1});
  const auto rows = patchify_mask(mask, cfg.downsample, cfg.intermediate).rows();
  std::ostringstream os;
  os << "r = " << cfg.tokens() << ", target rows " << rows << ", L = " << state.Z.rows() << " for \"" << text
     << "\"";
  return {cfg.input_shape == Dims3{64, 40, 32} && cfg.downsample == 8 && cfg.tokens() == 160 && rows == 160u &&
              state.Z.rows() == 168,
          os.str()};
}

Outcome loss_routing() {
  Model<double> model(ModelConfig::tiny());
  const auto& c = model.config();
  std::mt19937_64 rng(5);
  std::vector<std::vector<double>> xs;
  for (int i = 0; i < 4; ++i) xs.push_back(normal_vector(c.input_shape.count(), rng));
  std::vector<std::vector<std::int32_t>> ids{{3, 4}, {5, 6, 7}, {4, 0, 8}, {9}};
  VolumeGrid mask(c.input_shape, {1, 1, 1});
  for (auto& v : mask.data) v = (rng() % 4 == 0) ? 1.0f : 0.0f;
  const auto pt = patchify_mask(mask, c.downsample, c.intermediate);
  std::vector<BatchItemTarget> tgts{BatchItemTarget::classification(1), BatchItemTarget::segmentation(pt),
                                    BatchItemTarget::classification(0), BatchItemTarget::segmentation(pt)};

  std::vector<std::shared_ptr<Model<double>::Cache>> caches;
  std::vector<ModelOutput<double>> raw;
  std::vector<ItemOutputs<double>> outs;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    caches.push_back(model.make_cache());
    raw.push_back(model.forward(xs[i], ids[i], caches.back().get()));
  }
  for (auto& o : raw) outs.push_back({o.cls_logit, o.seg_logits});
  auto bl = batch_loss<double>(outs, tgts);

  double independent = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    independent += tgts[i].kind == TargetKind::classification ? naive_bce(raw[i].cls_logit, *tgts[i].y)
                                                               : naive_focal(raw[i].seg_logits, pt);
  independent /= static_cast<double>(xs.size());

  auto grad_norm = [&](const char* name) {
    double s = 0.0;
    for (double g : model.params().at(name).grad) s += std::abs(g);
    return s;
  };
  bool routed = true;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    model.params().zero_grad();
    model.backward(*caches[i], bl.d_cls[i], bl.d_seg[i]);
    const bool cls = tgts[i].kind == TargetKind::classification;
    const double own = cls ? grad_norm("head.cls.weight") : grad_norm("head.seg.weight");
    const double other = cls ? grad_norm("head.seg.weight") + grad_norm("head.seg.bias")
                             : grad_norm("head.cls.weight") + grad_norm("head.cls.bias");
    routed = routed && other == 0.0 && own > 0.0;
  }
  const double gap = std::abs(bl.loss - independent);
  std::ostringstream os;
  os << "cross-head gradients " << (routed ? "exactly zero" : "NONZERO") << ", |batch - mean per-item| = " << gap;
  return {routed && gap < 1e-9, os.str()};
}

Outcome focal_values() {
  PatchTarget one;
  one.grid = {1, 1, 1};
  one.values = {1};
  const double expected = 10.0 * 0.25 * 0.25 * std::log(2.0);
  const double got = focal_loss<double>(std::vector<double>{0.0}, one);

  std::mt19937_64 rng(3);
  auto z = normal_vector(128, rng, 2.0);
  PatchTarget t;
  t.grid = {128, 1, 1};
  for (std::size_t i = 0; i < z.size(); ++i) t.values.push_back(static_cast<std::uint8_t>(rng() % 2));
  double bce = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) bce += naive_bce(z[i], t.values[i]);
  bce /= static_cast<double>(z.size());
  const double g0 = focal_loss<double>(z, t, FocalParams{std::nullopt, 0.0, 10.0});
  std::ostringstream os;
  os.precision(10);
  os << "single entry " << got << " (expected " << expected << "), gamma 0 gap " << std::abs(g0 - 10.0 * bce);
  return {std::abs(got - expected) < 1e-6 && std::abs(expected - 0.43322) < 1e-5 &&
              std::abs(g0 - 10.0 * bce) < 1e-9,
          os.str()};
}

ScoredSet random_set(std::mt19937_64& rng, std::size_t n) {
  ScoredSet s;
  std::uniform_int_distribution<int> coarse(0, 6);
  std::normal_distribution<double> g(0.0, 1.0);
  const bool ties = rng() % 2 == 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = i < 1 ? 1 : (i < 2 ? 0 : static_cast<int>(rng() % 2));
    s.labels.push_back(y);
    s.scores.push_back(ties ? coarse(rng) + 0.5 * y : g(rng) + 0.7 * y);
  }
  return s;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> size(2, 50);
  int auroc_bad = 0, delong_bad = 0;
  for (int i = 0; i < 1000; ++i) {
    auto s = random_set(rng, size(rng));
    const double a = auroc(s);
    if (a != testing::brute_auroc(s.scores, s.labels)) ++auroc_bad;
    if (s.positives() >= 2 && s.negatives() >= 2 && std::abs(delong_ci(s).auc - a) > 1e-12) ++delong_bad;
  }

  // DeLong variance vs bootstrap on 40 independent n = 40 sets.
  double worst_var = 0.0;
  int p_within = 0;
  double p0_gap = 1.0;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    std::mt19937_64 r(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    ScoredSet s;
    for (int i = 0; i < 40; ++i) {
      const int y = i < 20;
      s.labels.push_back(y);
      s.scores.push_back(g(r) + (y ? 1.0 : 0.0));
    }
    const double boot = testing::bootstrap_auc_variance(s, 10000, seed + 100);
    worst_var = std::max(worst_var, std::abs(delong_ci(s).variance - boot) / boot);

    // Two correlated readers on the same 60 cases.
    ScoredSet a, b;
    for (int i = 0; i < 60; ++i) {
      const int y = i < 30;
      const double latent = g(r) + (y ? 0.8 : 0.0);
      a.labels.push_back(y);
      b.labels.push_back(y);
      a.scores.push_back(latent + 0.7 * g(r));
      b.scores.push_back(latent + 0.7 * g(r) + (y ? 0.3 : 0.0));
    }
    const double gap = std::abs(delong_paired_pvalue(a, b) - testing::permutation_pvalue(a, b, 10000, seed + 7));
    if (seed == 0) p0_gap = gap;
    p_within += gap <= 0.02;
  }
  std::ostringstream os;
  os << "AUROC mismatches " << auroc_bad << "/1000, DeLong point mismatches " << delong_bad
     << ", worst variance gap " << worst_var * 100 << "% over 40 sets, p-value gap " << p0_gap
     << " (within 0.02 on " << p_within << "/40 sets)";
  return {auroc_bad == 0 && delong_bad == 0 && worst_var < 0.15 && p0_gap <= 0.02, os.str()};
}

Outcome overfit_smoke() {
  const auto t0 = Clock::now();
  const FrameSpec frame = FrameSpec::desk();
  const ModelConfig mc = ModelConfig::desk();
  const auto vocab = Vocabulary::build(TaskBank::builtin().corpus());
  testing::MemorySource source(frame, mc, vocab);
  std::vector<TaskInstance> instances;
  for (int v = 0; v < 8; ++v) {
    testing::SyntheticOptions o;
    o.seed = 100 + static_cast<std::uint64_t>(v);
    o.lesion = v < 4;
    o.organ = v >= 4;
    o.organ_radius_mm = 25.0;
    o.body_dx = v % 3 - 1.0;
    o.body_dy = (v % 2) * 2.0;
    o.spacing = {0.9 + 0.05 * v, 0.9 + 0.05 * v, 1.2};
    o.dims = {130, 110, 60};
    auto c = testing::make_synthetic(o);
    auto framed = frame_case(c.image, {{"seg_heart", c.organ}}, &c.lung, frame);
    const std::string ref = "synthetic" + std::to_string(v);
    source.add(ref, framed.image, framed.masks);
    instances.push_back(make_instance(ref, "CT-RATE", "lung_nodule", v < 4 ? 1 : 0));
    if (v >= 4) instances.push_back(make_instance(ref, "CT-RATE", "seg_heart", std::nullopt));
  }

  Model<float> model(mc);
  TrainConfig cfg = TrainConfig::desk();
  cfg.total_steps = 500;
  cfg.batch_size = static_cast<int>(instances.size());
  cfg.base_lr = 2e-3;
  cfg.augment = false;
  cfg.val_interval = cfg.total_steps;
  train(model, instances, {}, source, cfg);

  ScoredSet scored;
  double loss = 0.0, min_iou = 1.0;
  for (const auto& inst : instances) {
    auto s = source.fetch(inst, std::nullopt);
    auto out = model.forward(s.input, s.ids);
    std::vector<ItemOutputs<float>> outs{{out.cls_logit, out.seg_logits}};
    std::vector<BatchItemTarget> tgts{s.target};
    loss += batch_loss<float>(outs, tgts).loss;
    if (!inst.is_segmentation()) {
      scored.scores.push_back(out.cls_logit);
      scored.labels.push_back(inst.label());
      continue;
    }
    auto pred = unpack_mask(threshold_logits(out.seg_logits, mc.token_grid(), mc.downsample, mc.intermediate),
                            mc.token_grid());
    // Ground truth: the framed mask max-pooled by d/u, independent of patchify.
    auto truth = brute_pool(finalize_mask(source.mask(inst.volume_ref, inst.task_key), frame),
                            mc.downsample / mc.intermediate);
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < truth.data.size(); ++i) {
      const bool a = pred.data[i] > 0.5f, b = truth.data[i] > 0.5f;
      inter += a && b;
      uni += a || b;
    }
    min_iou = std::min(min_iou, uni > 0 ? inter / uni : 0.0);
  }
  loss /= static_cast<double>(instances.size());
  const double train_auroc = auroc(scored);
  const double secs = seconds_since(t0);
  std::ostringstream os;
  os << "loss " << loss << ", AUROC " << train_auroc << ", min IoU " << min_iou << ", " << secs << " s";
  return {loss < 0.05 && train_auroc == 1.0 && min_iou > 0.9 && secs < 300.0, os.str()};
}

Outcome preprocessing_contract() {
  const FrameSpec frame = FrameSpec::desk();
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> dx(40, 140), dy(40, 120), dz(24, 80);
  std::uniform_real_distribution<double> sxy(0.6, 2.0), sz(0.8, 3.0), unit(-1.0, 1.0);
  int shape_bad = 0, clip_bad = 0, rerun_bad = 0, center_bad = 0;
  double worst_center = 0.0;
  for (int i = 0; i < 100; ++i) {
    testing::SyntheticOptions o;
    o.dims = {dx(rng), dy(rng), dz(rng)};
    const double s = sxy(rng);
    o.spacing = {s, s, sz(rng)};
    o.seed = static_cast<std::uint64_t>(i);
    o.organ = i % 2 == 0;
    o.lesion = i % 3 == 0;
    auto c = testing::make_synthetic(o);
    auto framed = frame_case(c.image, {{"seg_heart", c.organ}}, &c.lung, frame);
    auto input = finalize_input(framed.image, frame);
    shape_bad += input.dims != frame.input_shape;
    for (float v : framed.image.data) clip_bad += v < kHuMin || v > kHuMax;
    auto again = finalize_input(frame_case(c.image, {{"seg_heart", c.organ}}, &c.lung, frame).image, frame);
    rerun_bad += again.data != input.data;

    testing::SyntheticOptions body;
    body.dims = o.dims;
    body.spacing = o.spacing;
    body.noise_hu = 0.0;
    body.body_dx = 0.1 * o.dims.x * unit(rng);
    body.body_dy = 0.1 * o.dims.y * unit(rng);
    auto b = testing::make_synthetic(body);
    const auto found = body_center(b.image);
    const double err = std::max(std::abs(found.x - b.center_x), std::abs(found.y - b.center_y));
    worst_center = std::max(worst_center, err);
    center_bad += err > 0.5;
  }
  std::ostringstream os;
  os << "100 cases: shape failures " << shape_bad << ", out-of-range voxels " << clip_bad << ", rerun differences "
     << rerun_bad << ", worst centroid error " << worst_center << " voxel";
  return {shape_bad == 0 && clip_bad == 0 && rerun_bad == 0 && center_bad == 0, os.str()};
}

Outcome task_mix_contract() {
  std::vector<TaskInstance> in;
  for (int v = 0; v < 60; ++v) {
    const auto vol = "vol" + std::to_string(v);
    in.push_back(make_instance(vol, "CT-RATE", "emphysema", v < 7 ? 1 : 0));
    in.push_back(make_instance(vol, "CT-RATE", "atelectasis", v % 4 == 0 ? 1 : 0));
    if (v < 10) in.push_back(make_instance(vol, "CT-RATE", "cardiomegaly", v < 8 ? 1 : 0));
  }
  auto mix = build_training_mix(in, 4, {0.0, 10, "LUNA16"});
  std::map<std::string, std::pair<int, int>> counts;
  for (const auto& t : mix.instances) (t.label() ? counts[t.task_key].first : counts[t.task_key].second)++;
  const bool balanced = counts["emphysema"] == std::pair{7, 7} && counts["atelectasis"] == std::pair{15, 15} &&
                        counts["cardiomegaly"] == std::pair{8, 2};

  std::vector<TaskInstance> luna;
  for (int v = 0; v < 601; ++v) luna.push_back(make_instance("luna" + std::to_string(v), "LUNA16", "seg_lung_nodules",
                                                             std::nullopt));
  const auto expanded = build_training_mix(luna, 1).instances.size();

  auto all = in;
  all.insert(all.end(), luna.begin(), luna.end());
  const bool same = build_training_mix(all, 21).instances == build_training_mix(all, 21).instances;
  const bool differs = build_training_mix(all, 21).instances != build_training_mix(all, 22).instances;
  std::ostringstream os;
  os << "balanced " << (balanced ? "yes" : "no") << ", LUNA16 601 -> " << expanded << ", same seed identical "
     << (same ? "yes" : "no") << ", other seed differs " << (differs ? "yes" : "no");
  return {balanced && expanded == 6010u && same && differs, os.str()};
}

Outcome schedule_optimizer() {
  TrainConfig cfg = TrainConfig::desk();
  cfg.warmup_steps = 25;
  const double at_warmup = lr_schedule(25, cfg);
  const double at_end = lr_schedule(cfg.total_steps, cfg);
  std::vector<double> theta{0.0}, grad{1.0}, m{0.0}, v{0.0};
  adamw_update<double>(theta, grad, m, v, 1, 1e-3, AdamWConfig{0.9, 0.999, 1e-8, 0.0});
  std::ostringstream os;
  os.precision(12);
  os << "lr(25) = " << at_warmup << ", lr(" << cfg.total_steps << ") = " << at_end << ", theta = " << theta[0];
  return {at_warmup == cfg.base_lr && at_end == 0.0 && std::abs(theta[0] + 1e-3) < 1e-6, os.str()};
}

Outcome weight_inflation() {
  const int c_in = 3, c_out = 4, k = 3, kd = 3;
  const Dims3 d{12, 10, 9};
  std::mt19937_64 rng(6);
  auto w2 = normal_vector(static_cast<std::size_t>(c_out) * c_in * k * k, rng);
  auto slice = normal_vector(static_cast<std::size_t>(c_in) * d.x * d.y, rng);
  std::vector<double> in(static_cast<std::size_t>(c_in) * d.count());
  for (int z = 0; z < d.z; ++z)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x)
        for (int c = 0; c < c_in; ++c) in[d.index(x, y, z) * c_in + c] = slice[(y * d.x + x) * c_in + c];
  auto w3 = inflate_2d_to_3d<double>(w2, c_out, c_in, k, kd);
  Dims3 od{};
  auto out = conv3d<double>(in, d, c_in, w3, c_out, kd, k, 1, {}, &od);
  // 2D reference: direct zero-padded convolution of the slice.
  double worst = 0.0, scale = 0.0;
  for (int o = 0; o < c_out; ++o)
    for (int y = 0; y < d.y; ++y)
      for (int x = 0; x < d.x; ++x) {
        double ref = 0.0;
        for (int c = 0; c < c_in; ++c)
          for (int b = 0; b < k; ++b)
            for (int e = 0; e < k; ++e) {
              const int iy = y + b - k / 2, ix = x + e - k / 2;
              if (iy < 0 || ix < 0 || iy >= d.y || ix >= d.x) continue;
              ref += slice[(iy * d.x + ix) * c_in + c] * w2[((static_cast<std::size_t>(o) * c_in + c) * k + b) * k + e];
            }
        for (int z = kd / 2; z < d.z - kd / 2; ++z) {
          worst = std::max(worst, std::abs(out(static_cast<Eigen::Index>(od.index(x, y, z)), o) - kd * ref));
          scale = std::max(scale, std::abs(kd * ref));
        }
      }
  std::ostringstream os;
  os << "max interior deviation " << worst << " at output scale " << scale;
  return {od == d && worst <= 1e-12 * std::max(1.0, scale), os.str()};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"gradient correctness", gradient_correctness},
      {"patchify/unpack oracle", patchify_oracle},
      {"token-count identity", token_count},
      {"loss routing", loss_routing},
      {"focal loss values", focal_values},
      {"metric oracles", metric_oracles},
      {"overfit smoke test", overfit_smoke},
      {"preprocessing contract", preprocessing_contract},
      {"task-mix contract", task_mix_contract},
      {"schedule/optimizer", schedule_optimizer},
      {"weight inflation", weight_inflation},
  };
  int failed = 0, index = 0;
  for (const auto& [name, run] : criteria) {
    ++index;
    Outcome r;
    try {
      r = run();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    failed += !r.pass;
    std::printf("%s %2d %s: %s\n", r.pass ? "PASS" : "FAIL", index, name, r.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", index - failed, index);
  return failed == 0 ? 0 : 1;
}
