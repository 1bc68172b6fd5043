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

#include "ctvlm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

namespace ctvlm {

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.input_shape = {256, 160, 128};
  c.downsample = 32;
  c.intermediate = 4;
  c.encoder_channels = {32, 64, 128, 256, 320};
  c.hidden = 768;
  c.heads = 12;
  c.max_text_length = 64;
  return c;
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.input_shape = {8, 8, 8};
  c.downsample = 4;
  c.intermediate = 2;
  c.encoder_channels = {4, 8};
  c.hidden = 16;
  c.heads = 2;
  c.layers = 2;
  c.max_text_length = 8;
  c.vocab_size = 32;
  return c;
}

Dims3 ModelConfig::token_grid() const {
  return {input_shape.x / downsample, input_shape.y / downsample, input_shape.z / downsample};
}

int ModelConfig::tokens() const { return static_cast<int>(token_grid().count()); }

void ModelConfig::check() const {
  if (downsample <= 0 || !std::has_single_bit(static_cast<unsigned>(downsample)))
    throw SchemaError("downsample factor must be a power of two");
  if (static_cast<int>(encoder_channels.size()) != std::countr_zero(static_cast<unsigned>(downsample)))
    throw SchemaError("encoder needs log2(d) = " +
                      std::to_string(std::countr_zero(static_cast<unsigned>(downsample))) +
                      " stages, got " + std::to_string(encoder_channels.size()));
  if (input_shape.x % downsample || input_shape.y % downsample || input_shape.z % downsample ||
      input_shape.x <= 0 || input_shape.y <= 0 || input_shape.z <= 0)
    throw SchemaError("d=" + std::to_string(downsample) + " must divide input shape " +
                      to_string(input_shape));
  if (intermediate <= 0 || downsample % intermediate)
    throw SchemaError("u must divide d");
  if (hidden <= 0 || heads <= 0 || hidden % heads) throw SchemaError("f_h must be divisible by heads");
  if (layers < 0 || ffn_multiplier <= 0 || kernel_size <= 0 || kernel_size % 2 == 0)
    throw SchemaError("bad layer count, ffn multiplier or kernel size");
  if (max_text_length <= 0) throw SchemaError("max text length must be positive");
  if (vocab_size < 2) throw SchemaError("vocabulary must hold at least PAD and UNK");
  for (int c : encoder_channels)
    if (c <= 0) throw SchemaError("encoder channels must be positive");
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <class T>
using Map = Eigen::Map<Matrix<T>>;
template <class T>
using CMap = Eigen::Map<const Matrix<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

constexpr double kLnEps = 1e-5;

template <class T>
void check_finite(const Matrix<T>& m, const std::string& where) {
  if (!m.allFinite()) throw NumericFault(where, "non-finite activation");
}

struct ConvGeometry {
  Dims3 in;
  Dims3 out;
  int channels = 1;
  int kd = 3;
  int k = 3;
  int stride = 1;
  int row_length() const { return kd * k * k * channels; }
};

ConvGeometry conv_geometry(Dims3 in, int channels, int kd, int k, int stride) {
  ConvGeometry g{in, {}, channels, kd, k, stride};
  int pz = kd / 2, p = k / 2;
  g.out = {(in.x + 2 * p - k) / stride + 1, (in.y + 2 * p - k) / stride + 1,
           (in.z + 2 * pz - kd) / stride + 1};
  return g;
}

// Rows: output voxels. Columns: taps (kz, ky, kx) then input channel.
template <class T>
Matrix<T> im2col(const T* in, const ConvGeometry& g) {
  Matrix<T> cols = Matrix<T>::Zero(static_cast<Eigen::Index>(g.out.count()), g.row_length());
  const int pz = g.kd / 2, p = g.k / 2, c = g.channels;
  Eigen::Index row = 0;
  for (int oz = 0; oz < g.out.z; ++oz)
    for (int oy = 0; oy < g.out.y; ++oy)
      for (int ox = 0; ox < g.out.x; ++ox, ++row) {
        T* dst = cols.row(row).data();
        for (int kz = 0; kz < g.kd; ++kz) {
          int iz = oz * g.stride - pz + kz;
          for (int ky = 0; ky < g.k; ++ky) {
            int iy = oy * g.stride - p + ky;
            for (int kx = 0; kx < g.k; ++kx, dst += c) {
              int ix = ox * g.stride - p + kx;
              if (iz < 0 || iy < 0 || ix < 0 || iz >= g.in.z || iy >= g.in.y || ix >= g.in.x)
                continue;
              const T* src = in + g.in.index(ix, iy, iz) * c;
              std::copy(src, src + c, dst);
            }
          }
        }
      }
  return cols;
}

template <class T>
void col2im_add(const Matrix<T>& dcols, const ConvGeometry& g, T* din) {
  const int pz = g.kd / 2, p = g.k / 2, c = g.channels;
  Eigen::Index row = 0;
  for (int oz = 0; oz < g.out.z; ++oz)
    for (int oy = 0; oy < g.out.y; ++oy)
      for (int ox = 0; ox < g.out.x; ++ox, ++row) {
        const T* src = dcols.row(row).data();
        for (int kz = 0; kz < g.kd; ++kz) {
          int iz = oz * g.stride - pz + kz;
          for (int ky = 0; ky < g.k; ++ky) {
            int iy = oy * g.stride - p + ky;
            for (int kx = 0; kx < g.k; ++kx, src += c) {
              int ix = ox * g.stride - p + kx;
              if (iz < 0 || iy < 0 || ix < 0 || iz >= g.in.z || iy >= g.in.y || ix >= g.in.x)
                continue;
              T* dst = din + g.in.index(ix, iy, iz) * c;
              for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
            }
          }
        }
      }
}

// (c_out, c_in, kd, k, k) -> (kd*k*k*c_in, c_out)
template <class T>
std::vector<T> oidhw_to_gemm(std::span<const T> w, int c_out, int c_in, int kd, int k) {
  std::vector<T> out(w.size());
  const int taps = kd * k * k;
  for (int o = 0; o < c_out; ++o)
    for (int i = 0; i < c_in; ++i)
      for (int t = 0; t < taps; ++t)
        out[(static_cast<std::size_t>(t) * c_in + i) * c_out + o] =
            w[(static_cast<std::size_t>(o) * c_in + i) * taps + t];
  return out;
}

template <class T>
void layernorm_forward(const Matrix<T>& x, const T* gamma, const T* beta, Matrix<T>& y,
                       Matrix<T>& xhat, std::vector<T>& rstd) {
  const auto rows = x.rows(), cols = x.cols();
  y.resize(rows, cols);
  xhat.resize(rows, cols);
  rstd.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto row = x.row(r);
    T mean = row.mean();
    T var = (row.array() - mean).square().mean();
    T rs = T(1) / std::sqrt(var + T(kLnEps));
    rstd[static_cast<std::size_t>(r)] = rs;
    for (Eigen::Index c = 0; c < cols; ++c) {
      T h = (row(c) - mean) * rs;
      xhat(r, c) = h;
      y(r, c) = gamma[c] * h + beta[c];
    }
  }
}

template <class T>
Matrix<T> layernorm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const std::vector<T>& rstd,
                             const T* gamma, T* dgamma, T* dbeta) {
  const auto rows = dy.rows(), cols = dy.cols();
  Matrix<T> dx(rows, cols);
  std::vector<T> dh(static_cast<std::size_t>(cols));
  for (Eigen::Index r = 0; r < rows; ++r) {
    T mean_dh = 0, mean_dh_h = 0;
    for (Eigen::Index c = 0; c < cols; ++c) {
      dgamma[c] += dy(r, c) * xhat(r, c);
      dbeta[c] += dy(r, c);
      dh[static_cast<std::size_t>(c)] = dy(r, c) * gamma[c];
      mean_dh += dh[static_cast<std::size_t>(c)];
      mean_dh_h += dh[static_cast<std::size_t>(c)] * xhat(r, c);
    }
    mean_dh /= T(cols);
    mean_dh_h /= T(cols);
    for (Eigen::Index c = 0; c < cols; ++c)
      dx(r, c) = rstd[static_cast<std::size_t>(r)] *
                 (dh[static_cast<std::size_t>(c)] - mean_dh - xhat(r, c) * mean_dh_h);
  }
  return dx;
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
Matrix<T> apply_gelu(const Matrix<T>& x) {
  return x.unaryExpr([](T v) { return gelu(v); });
}

template <class T>
void add_bias(Matrix<T>& y, const T* b) {
  y.rowwise() += Eigen::Map<const RowVec<T>>(b, y.cols());
}

template <class T>
void accumulate_colsum(const Matrix<T>& dy, T* db) {
  Eigen::Map<RowVec<T>>(db, dy.cols()) += dy.colwise().sum();
}

template <class T>
T truncated_normal(std::mt19937_64& rng, T stddev) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    double v = n(rng);
    if (std::abs(v) <= 2.0) return static_cast<T>(v * static_cast<double>(stddev));
  }
}

}  // namespace

template <class T>
std::vector<T> inflate_2d_to_3d(std::span<const T> weights2d, int c_out, int c_in, int k, int k_depth) {
  if (k_depth < 1) throw SchemaError("inflation depth must be at least 1");
  const std::size_t plane = static_cast<std::size_t>(k) * k;
  if (weights2d.size() != static_cast<std::size_t>(c_out) * c_in * plane)
    throw ShapeError("2D weights do not match (c_out, c_in, k, k)");
  std::vector<T> out(static_cast<std::size_t>(c_out) * c_in * k_depth * plane);
  for (std::size_t f = 0; f < static_cast<std::size_t>(c_out) * c_in; ++f)
    for (int z = 0; z < k_depth; ++z)
      std::copy_n(weights2d.begin() + static_cast<std::ptrdiff_t>(f * plane), plane,
                  out.begin() + static_cast<std::ptrdiff_t>((f * k_depth + z) * plane));
  return out;
}

template <class T>
Matrix<T> conv3d(std::span<const T> input, Dims3 dims, int c_in, std::span<const T> weights, int c_out,
                 int k_depth, int k, int stride, std::span<const T> bias, Dims3* out_dims) {
  if (input.size() != dims.count() * c_in) throw ShapeError("conv3d input size mismatch");
  if (weights.size() != static_cast<std::size_t>(c_out) * c_in * k_depth * k * k)
    throw ShapeError("conv3d weight size mismatch");
  auto g = conv_geometry(dims, c_in, k_depth, k, stride);
  auto w = oidhw_to_gemm(weights, c_out, c_in, k_depth, k);
  Matrix<T> y = im2col(input.data(), g) * CMap<T>(w.data(), g.row_length(), c_out);
  if (!bias.empty()) add_bias(y, bias.data());
  if (out_dims) *out_dims = g.out;
  return y;
}

// ---------------------------------------------------------------------------
// Model

template <class T>
struct Model<T>::Layout {
  struct Stage {
    std::size_t w, b, ln_g, ln_b;
    ConvGeometry geom;
    int c_out;
  };
  struct Block {
    std::size_t wqkv, bqkv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b;
  };
  std::vector<Stage> stages;
  std::size_t proj_w, proj_b, v_cls, v_sep, pos, tok;
  std::vector<Block> blocks;
  std::size_t cls_w, cls_b, seg_w, seg_b;
};

template <class T>
struct Model<T>::Cache {
  struct Stage {
    Matrix<T> cols, xhat, pre;  // pre: layer norm output, GELU input
    std::vector<T> rstd;
    Matrix<T> act;
  };
  struct Block {
    Matrix<T> x_in, qkv, attn, xhat1, x1, h_pre, h_act, xhat2;
    std::vector<Matrix<T>> probs;
    std::vector<T> rstd1, rstd2;
  };
  std::vector<Stage> stages;
  std::vector<std::int32_t> ids;
  std::vector<bool> key_mask;
  std::vector<Block> blocks;
  Matrix<T> E;
};

template <class T>
Model<T>::Model(const ModelConfig& config) : config_(config), layout_(std::make_unique<Layout>()) {
  config_.check();
  auto& L = *layout_;
  const int f = config_.hidden;
  const int k = config_.kernel_size;
  std::mt19937_64 rng(config_.seed);

  Dims3 dims = config_.input_shape;
  int c_in = 1;
  for (std::size_t s = 0; s < config_.encoder_channels.size(); ++s) {
    const int c_out = config_.encoder_channels[s];
    typename Layout::Stage st;
    st.geom = conv_geometry(dims, c_in, k, k, 2);
    st.c_out = c_out;
    const std::string name = "encoder.stage" + std::to_string(s);
    st.w = params_.add(name + ".conv.weight", {k, k, k, c_in, c_out}, true);
    st.b = params_.add(name + ".conv.bias", {c_out}, false);
    st.ln_g = params_.add(name + ".norm.weight", {c_out}, false);
    st.ln_b = params_.add(name + ".norm.bias", {c_out}, false);
    const T stddev = T(1) / std::sqrt(T(st.geom.row_length()));
    for (auto& v : params_[st.w].value) v = truncated_normal(rng, stddev);
    std::fill(params_[st.ln_g].value.begin(), params_[st.ln_g].value.end(), T(1));
    dims = st.geom.out;
    c_in = c_out;
    L.stages.push_back(st);
  }
  L.proj_w = params_.add("encoder.proj.weight", {c_in, f}, true);
  L.proj_b = params_.add("encoder.proj.bias", {f}, false);
  for (auto& v : params_[L.proj_w].value) v = truncated_normal(rng, T(1) / std::sqrt(T(c_in)));

  auto embed = [&](const std::string& name, std::vector<int> shape) {
    auto i = params_.add(name, std::move(shape), false);
    for (auto& v : params_[i].value) v = truncated_normal(rng, T(0.02));
    return i;
  };
  L.v_cls = embed("embed.cls", {f});
  L.v_sep = embed("embed.sep", {f});
  L.pos = embed("embed.position", {config_.max_sequence(), f});
  L.tok = embed("embed.token", {config_.vocab_size, f});

  auto dense = [&](const std::string& name, int in, int out) {
    auto w = params_.add(name + ".weight", {in, out}, true);
    auto b = params_.add(name + ".bias", {out}, false);
    for (auto& v : params_[w].value) v = truncated_normal(rng, T(0.02));
    return std::pair{w, b};
  };
  auto norm = [&](const std::string& name) {
    auto g = params_.add(name + ".weight", {f}, false);
    auto b = params_.add(name + ".bias", {f}, false);
    std::fill(params_[g].value.begin(), params_[g].value.end(), T(1));
    return std::pair{g, b};
  };
  const int ffn = f * config_.ffn_multiplier;
  for (int l = 0; l < config_.layers; ++l) {
    const std::string name = "transformer.layer" + std::to_string(l);
    typename Layout::Block b;
    std::tie(b.wqkv, b.bqkv) = dense(name + ".attn.qkv", f, 3 * f);
    std::tie(b.wo, b.bo) = dense(name + ".attn.out", f, f);
    std::tie(b.ln1_g, b.ln1_b) = norm(name + ".norm1");
    std::tie(b.w1, b.b1) = dense(name + ".ffn.in", f, ffn);
    std::tie(b.w2, b.b2) = dense(name + ".ffn.out", ffn, f);
    std::tie(b.ln2_g, b.ln2_b) = norm(name + ".norm2");
    L.blocks.push_back(b);
  }
  std::tie(L.cls_w, L.cls_b) = dense("head.cls", f, 1);
  std::tie(L.seg_w, L.seg_b) = dense("head.seg", f, config_.patch_size());
}

template <class T>
Model<T>::~Model() = default;
template <class T>
Model<T>::Model(const Model& o) : config_(o.config_), params_(o.params_), layout_(std::make_unique<Layout>(*o.layout_)) {}
template <class T>
Model<T>& Model<T>::operator=(const Model& o) {
  if (this != &o) {
    config_ = o.config_;
    params_ = o.params_;
    layout_ = std::make_unique<Layout>(*o.layout_);
  }
  return *this;
}
template <class T>
Model<T>::Model(Model&&) noexcept = default;
template <class T>
Model<T>& Model<T>::operator=(Model&&) noexcept = default;

template <class T>
std::shared_ptr<typename Model<T>::Cache> Model<T>::make_cache() const {
  return std::make_shared<Cache>();
}

template <class T>
void Model<T>::inflate_encoder_stage(int stage, std::span<const T> weights2d) {
  if (stage < 0 || stage >= static_cast<int>(layout_->stages.size()))
    throw SchemaError("no encoder stage " + std::to_string(stage));
  const auto& st = layout_->stages[static_cast<std::size_t>(stage)];
  const int k = config_.kernel_size;
  auto w3 = inflate_2d_to_3d(weights2d, st.c_out, st.geom.channels, k, k);
  auto gemm = oidhw_to_gemm<T>(w3, st.c_out, st.geom.channels, k, k);
  params_[st.w].value.assign(gemm.begin(), gemm.end());
}

namespace {

template <class T, class Stage, class StageCache>
void encoder_stage_forward(const ParameterStore<T>& P, const Stage& st, const T* in, StageCache& c) {
  c.cols = im2col(in, st.geom);
  Matrix<T> y = c.cols * CMap<T>(P[st.w].value.data(), st.geom.row_length(), st.c_out);
  add_bias(y, P[st.b].value.data());
  layernorm_forward(y, P[st.ln_g].value.data(), P[st.ln_b].value.data(), c.pre, c.xhat, c.rstd);
  c.act = apply_gelu(c.pre);
}

}  // namespace

template <class T>
Matrix<T> Model<T>::vision_encode(std::span<const T> input) const {
  if (input.size() != config_.input_shape.count())
    throw ShapeError("input has " + std::to_string(input.size()) + " voxels, expected " +
                     std::to_string(config_.input_shape.count()) + " for shape " +
                     to_string(config_.input_shape));
  const auto& L = *layout_;
  typename Cache::Stage c;
  Matrix<T> prev;
  const T* in = input.data();
  for (std::size_t s = 0; s < L.stages.size(); ++s) {
    encoder_stage_forward(params_, L.stages[s], in, c);
    check_finite(c.act, "encoder.stage" + std::to_string(s));
    prev = std::move(c.act);
    in = prev.data();
  }
  Matrix<T> ev = prev * CMap<T>(params_[L.proj_w].value.data(), prev.cols(), config_.hidden);
  add_bias(ev, params_[L.proj_b].value.data());
  check_finite(ev, "encoder.proj");
  return ev;
}

template <class T>
Matrix<T> Model<T>::assemble_sequence(const Matrix<T>& ev, std::span<const std::int32_t> ids) const {
  const int r = config_.tokens();
  const int f = config_.hidden;
  if (ev.rows() != r || ev.cols() != f)
    throw ShapeError("vision tokens must be (" + std::to_string(r) + ", " + std::to_string(f) + ")");
  if (ids.empty()) throw SchemaError("task description must have at least one token");
  const std::size_t t = std::min<std::size_t>(ids.size(), static_cast<std::size_t>(config_.max_text_length));
  const auto& L = *layout_;
  const Eigen::Index len = r + 2 + static_cast<Eigen::Index>(t);
  Matrix<T> z(len, f);
  CMap<T> tok(params_[L.tok].value.data(), config_.vocab_size, f);
  z.row(0) = Eigen::Map<const RowVec<T>>(params_[L.v_cls].value.data(), f);
  z.middleRows(1, r) = ev;
  z.row(r + 1) = Eigen::Map<const RowVec<T>>(params_[L.v_sep].value.data(), f);
  for (std::size_t i = 0; i < t; ++i) {
    if (ids[i] < 0 || ids[i] >= config_.vocab_size)
      throw SchemaError("token id " + std::to_string(ids[i]) + " outside vocabulary");
    z.row(r + 2 + static_cast<Eigen::Index>(i)) = tok.row(ids[i]);
  }
  z += CMap<T>(params_[L.pos].value.data(), config_.max_sequence(), f).topRows(len);
  return z;
}

namespace {

template <class T, class Block, class BlockCache>
Matrix<T> block_forward(const ParameterStore<T>& P, const Block& b, const Matrix<T>& x,
                        const std::vector<bool>& key_mask, int heads, BlockCache& c) {
  const Eigen::Index len = x.rows();
  const int f = static_cast<int>(x.cols());
  const int dh = f / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  c.x_in = x;
  c.qkv = x * CMap<T>(P[b.wqkv].value.data(), f, 3 * f);
  add_bias(c.qkv, P[b.bqkv].value.data());
  c.attn.resize(len, f);
  c.probs.resize(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto q = c.qkv.middleCols(h * dh, dh);
    auto k = c.qkv.middleCols(f + h * dh, dh);
    auto v = c.qkv.middleCols(2 * f + h * dh, dh);
    Matrix<T> s = (q * k.transpose()) * scale;
    for (Eigen::Index i = 0; i < len; ++i) {
      T m = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j < len; ++j)
        if (key_mask[static_cast<std::size_t>(j)]) m = std::max(m, s(i, j));
      T sum = 0;
      for (Eigen::Index j = 0; j < len; ++j) {
        T e = key_mask[static_cast<std::size_t>(j)] ? std::exp(s(i, j) - m) : T(0);
        s(i, j) = e;
        sum += e;
      }
      s.row(i) /= sum;
    }
    c.attn.middleCols(h * dh, dh).noalias() = s * v;
    c.probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  Matrix<T> r1 = x + c.attn * CMap<T>(P[b.wo].value.data(), f, f);
  add_bias(r1, P[b.bo].value.data());
  layernorm_forward(r1, P[b.ln1_g].value.data(), P[b.ln1_b].value.data(), c.x1, c.xhat1, c.rstd1);
  const int ffn = static_cast<int>(P[b.w1].shape[1]);
  c.h_pre = c.x1 * CMap<T>(P[b.w1].value.data(), f, ffn);
  add_bias(c.h_pre, P[b.b1].value.data());
  c.h_act = apply_gelu(c.h_pre);
  Matrix<T> r2 = c.x1 + c.h_act * CMap<T>(P[b.w2].value.data(), ffn, f);
  add_bias(r2, P[b.b2].value.data());
  Matrix<T> out;
  layernorm_forward(r2, P[b.ln2_g].value.data(), P[b.ln2_b].value.data(), out, c.xhat2, c.rstd2);
  return out;
}

template <class T>
Map<T> grad_map(Parameter<T>& p, Eigen::Index rows, Eigen::Index cols) {
  return Map<T>(p.grad.data(), rows, cols);
}

template <class T, class Block, class BlockCache>
Matrix<T> block_backward(ParameterStore<T>& P, const Block& b, const Matrix<T>& dout, int heads,
                         const BlockCache& c) {
  const Eigen::Index len = dout.rows();
  const int f = static_cast<int>(dout.cols());
  const int dh = f / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  const int ffn = static_cast<int>(P[b.w1].shape[1]);

  Matrix<T> dr2 = layernorm_backward(dout, c.xhat2, c.rstd2, P[b.ln2_g].value.data(),
                                     P[b.ln2_g].grad.data(), P[b.ln2_b].grad.data());
  grad_map(P[b.w2], ffn, f).noalias() += c.h_act.transpose() * dr2;
  accumulate_colsum(dr2, P[b.b2].grad.data());
  Matrix<T> dh_act = dr2 * CMap<T>(P[b.w2].value.data(), ffn, f).transpose();
  Matrix<T> dh_pre = dh_act.cwiseProduct(c.h_pre.unaryExpr([](T v) { return gelu_grad(v); }));
  grad_map(P[b.w1], f, ffn).noalias() += c.x1.transpose() * dh_pre;
  accumulate_colsum(dh_pre, P[b.b1].grad.data());
  Matrix<T> dx1 = dr2 + dh_pre * CMap<T>(P[b.w1].value.data(), f, ffn).transpose();

  Matrix<T> dr1 = layernorm_backward(dx1, c.xhat1, c.rstd1, P[b.ln1_g].value.data(),
                                     P[b.ln1_g].grad.data(), P[b.ln1_b].grad.data());
  grad_map(P[b.wo], f, f).noalias() += c.attn.transpose() * dr1;
  accumulate_colsum(dr1, P[b.bo].grad.data());
  Matrix<T> dattn = dr1 * CMap<T>(P[b.wo].value.data(), f, f).transpose();

  Matrix<T> dqkv(len, 3 * f);
  for (int h = 0; h < heads; ++h) {
    const auto& p = c.probs[static_cast<std::size_t>(h)];
    auto q = c.qkv.middleCols(h * dh, dh);
    auto k = c.qkv.middleCols(f + h * dh, dh);
    auto v = c.qkv.middleCols(2 * f + h * dh, dh);
    auto d_o = dattn.middleCols(h * dh, dh);
    dqkv.middleCols(2 * f + h * dh, dh).noalias() = p.transpose() * d_o;
    Matrix<T> dp = d_o * v.transpose();
    // Masked keys have zero probability, hence zero score gradient.
    Matrix<T> ds(len, len);
    for (Eigen::Index i = 0; i < len; ++i) {
      T dot = p.row(i).dot(dp.row(i));
      for (Eigen::Index j = 0; j < len; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot);
    }
    dqkv.middleCols(h * dh, dh).noalias() = (ds * k) * scale;
    dqkv.middleCols(f + h * dh, dh).noalias() = (ds.transpose() * q) * scale;
  }
  grad_map(P[b.wqkv], f, 3 * f).noalias() += c.x_in.transpose() * dqkv;
  accumulate_colsum(dqkv, P[b.bqkv].grad.data());
  return dr1 + dqkv * CMap<T>(P[b.wqkv].value.data(), f, 3 * f).transpose();
}

}  // namespace

template <class T>
SequenceState<T> Model<T>::encode(std::span<const T> input, std::span<const std::int32_t> ids) const {
  Cache cache;
  forward(input, ids, &cache);
  SequenceState<T> s;
  s.tokens = config_.tokens();
  s.Z = cache.blocks.empty() ? cache.E : cache.blocks.front().x_in;
  s.E = cache.E;
  s.key_mask = cache.key_mask;
  return s;
}

template <class T>
ModelOutput<T> Model<T>::forward(std::span<const T> input, std::span<const std::int32_t> ids,
                                 Cache* cache) const {
  Cache local;
  Cache& c = cache ? *cache : local;
  const auto& L = *layout_;
  const int f = config_.hidden;
  const int r = config_.tokens();
  if (input.size() != config_.input_shape.count())
    throw ShapeError("input has " + std::to_string(input.size()) + " voxels, expected " +
                     std::to_string(config_.input_shape.count()));

  c.stages.resize(L.stages.size());
  const T* in = input.data();
  for (std::size_t s = 0; s < L.stages.size(); ++s) {
    encoder_stage_forward(params_, L.stages[s], in, c.stages[s]);
    check_finite(c.stages[s].act, "encoder.stage" + std::to_string(s));
    in = c.stages[s].act.data();
  }
  const Matrix<T>& last = c.stages.back().act;
  Matrix<T> ev = last * CMap<T>(params_[L.proj_w].value.data(), last.cols(), f);
  add_bias(ev, params_[L.proj_b].value.data());
  check_finite(ev, "encoder.proj");

  Matrix<T> x = assemble_sequence(ev, ids);
  const std::size_t t = static_cast<std::size_t>(x.rows()) - static_cast<std::size_t>(r) - 2;
  c.ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(t));
  c.key_mask.assign(static_cast<std::size_t>(x.rows()), true);
  for (std::size_t i = 0; i < t; ++i)
    if (c.ids[i] == 0) c.key_mask[static_cast<std::size_t>(r) + 2 + i] = false;

  c.blocks.resize(L.blocks.size());
  for (std::size_t l = 0; l < L.blocks.size(); ++l) {
    x = block_forward(params_, L.blocks[l], x, c.key_mask, config_.heads, c.blocks[l]);
    check_finite(x, "transformer.layer" + std::to_string(l));
  }
  c.E = std::move(x);

  ModelOutput<T> out;
  out.cls_logit = c.E.row(0).dot(Eigen::Map<const RowVec<T>>(params_[L.cls_w].value.data(), f)) +
                  params_[L.cls_b].value[0];
  const int u3 = config_.patch_size();
  Matrix<T> seg = c.E.middleRows(1, r) * CMap<T>(params_[L.seg_w].value.data(), f, u3);
  add_bias(seg, params_[L.seg_b].value.data());
  if (!std::isfinite(out.cls_logit)) throw NumericFault("head.cls", "non-finite logit");
  check_finite(seg, "head.seg");
  out.seg_logits.assign(seg.data(), seg.data() + seg.size());
  return out;
}

template <class T>
void Model<T>::backward(const Cache& c, T d_cls, std::span<const T> d_seg) {
  auto& L = *layout_;
  auto& P = params_;
  const int f = config_.hidden;
  const int r = config_.tokens();
  const int u3 = config_.patch_size();
  if (c.stages.size() != L.stages.size() || c.blocks.size() != L.blocks.size())
    throw SchemaError("backward called with a cache from a different forward");
  if (!d_seg.empty() && d_seg.size() != static_cast<std::size_t>(r) * u3)
    throw ShapeError("segmentation gradient has the wrong size");

  Matrix<T> dE = Matrix<T>::Zero(c.E.rows(), f);
  if (d_cls != T(0)) {
    Eigen::Map<RowVec<T>>(P[L.cls_w].grad.data(), f) += d_cls * c.E.row(0);
    P[L.cls_b].grad[0] += d_cls;
    dE.row(0) += d_cls * Eigen::Map<const RowVec<T>>(P[L.cls_w].value.data(), f);
  }
  if (!d_seg.empty()) {
    const Matrix<T> ds = CMap<T>(d_seg.data(), r, u3);
    grad_map(P[L.seg_w], f, u3).noalias() += c.E.middleRows(1, r).transpose() * ds;
    accumulate_colsum(ds, P[L.seg_b].grad.data());
    dE.middleRows(1, r).noalias() += ds * CMap<T>(P[L.seg_w].value.data(), f, u3).transpose();
  }

  for (std::size_t l = L.blocks.size(); l-- > 0;)
    dE = block_backward(P, L.blocks[l], dE, config_.heads, c.blocks[l]);

  // Sequence assembly.
  const Eigen::Index len = dE.rows();
  grad_map(P[L.pos], config_.max_sequence(), f).topRows(len) += dE;
  Eigen::Map<RowVec<T>>(P[L.v_cls].grad.data(), f) += dE.row(0);
  Eigen::Map<RowVec<T>>(P[L.v_sep].grad.data(), f) += dE.row(r + 1);
  auto dtok = grad_map(P[L.tok], config_.vocab_size, f);
  for (std::size_t i = 0; i < c.ids.size(); ++i)
    dtok.row(c.ids[i]) += dE.row(r + 2 + static_cast<Eigen::Index>(i));
  Matrix<T> dev = dE.middleRows(1, r);

  // Encoder.
  const Matrix<T>& last = c.stages.back().act;
  grad_map(P[L.proj_w], last.cols(), f).noalias() += last.transpose() * dev;
  accumulate_colsum(dev, P[L.proj_b].grad.data());
  Matrix<T> dact = dev * CMap<T>(P[L.proj_w].value.data(), last.cols(), f).transpose();
  for (std::size_t s = L.stages.size(); s-- > 0;) {
    const auto& st = L.stages[s];
    const auto& sc = c.stages[s];
    Matrix<T> dpre = dact.cwiseProduct(sc.pre.unaryExpr([](T v) { return gelu_grad(v); }));
    Matrix<T> dy = layernorm_backward(dpre, sc.xhat, sc.rstd, P[st.ln_g].value.data(),
                                      P[st.ln_g].grad.data(), P[st.ln_b].grad.data());
    grad_map(P[st.w], st.geom.row_length(), st.c_out).noalias() += sc.cols.transpose() * dy;
    accumulate_colsum(dy, P[st.b].grad.data());
    if (s == 0) break;
    Matrix<T> dcols = dy * CMap<T>(P[st.w].value.data(), st.geom.row_length(), st.c_out).transpose();
    dact = Matrix<T>::Zero(static_cast<Eigen::Index>(st.geom.in.count()), st.geom.channels);
    col2im_add(dcols, st.geom, dact.data());
  }
}

template class Model<float>;
template class Model<double>;
template std::vector<float> inflate_2d_to_3d<float>(std::span<const float>, int, int, int, int);
template std::vector<double> inflate_2d_to_3d<double>(std::span<const double>, int, int, int, int);
template Matrix<float> conv3d<float>(std::span<const float>, Dims3, int, std::span<const float>, int, int,
                                     int, int, std::span<const float>, Dims3*);
template Matrix<double> conv3d<double>(std::span<const double>, Dims3, int, std::span<const double>, int,
                                       int, int, int, std::span<const double>, Dims3*);

}  // namespace ctvlm
