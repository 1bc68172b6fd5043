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

#include <Eigen/Core>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "ctvlm/common.hpp"
#include "ctvlm/params.hpp"

namespace ctvlm {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  Dims3 input_shape{64, 40, 32};
  int downsample = 8;    // d, product of encoder strides
  int intermediate = 4;  // u, side of the cube each segmentation row predicts
  // One stride-2 stage per entry; the count must equal log2(downsample).
  std::vector<int> encoder_channels{8, 16, 32};
  int kernel_size = 3;
  int hidden = 64;  // f_h
  int layers = 4;
  int heads = 4;
  int ffn_multiplier = 4;
  int max_text_length = 32;
  int vocab_size = 512;
  std::uint64_t seed = 0;

  static ModelConfig desk();
  static ModelConfig paper();
  // 8^3 input, f_h = 16; used for gradient checks.
  static ModelConfig tiny();

  Dims3 token_grid() const;
  int tokens() const;  // r = n m s / d^3
  int patch_size() const { return intermediate * intermediate * intermediate; }
  int max_sequence() const { return tokens() + 2 + max_text_length; }
  void check() const;
};

// Replicates each 2D filter k_depth times along depth, no rescaling.
// weights2d is (c_out, c_in, k, k) row-major; result is (c_out, c_in, k_depth, k, k).
template <class T>
std::vector<T> inflate_2d_to_3d(std::span<const T> weights2d, int c_out, int c_in, int k,
                                int k_depth);

// Channels-last 3D convolution with zero padding k/2 on each side.
// input is (dims.z, dims.y, dims.x, c_in); weights are (c_out, c_in, kd, k, k).
// Returns (out voxels, c_out) with out = (dims + 2*(k/2) - k) / stride + 1 per axis.
template <class T>
Matrix<T> conv3d(std::span<const T> input, Dims3 dims, int c_in, std::span<const T> weights,
                 int c_out, int k_depth, int k, int stride, std::span<const T> bias = {},
                 Dims3* out_dims = nullptr);

template <class T>
struct SequenceState {
  Matrix<T> Z;      // (L, f_h)
  Matrix<T> E;      // (L, f_h)
  int tokens = 0;   // r
  std::vector<bool> key_mask;  // true where attention may look

  auto cls() const { return E.row(0); }
  auto seg() const { return E.middleRows(1, tokens); }
};

template <class T>
struct ModelOutput {
  T cls_logit = T(0);
  std::vector<T> seg_logits;  // (r, u^3) row-major
};

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& config);
  ~Model();
  Model(const Model&);
  Model& operator=(const Model&);
  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }

  // Activations retained by forward() for backward().
  struct Cache;

  // E_v = f_v(X): (r, f_h), rows in z-slowest x-fastest token order.
  Matrix<T> vision_encode(std::span<const T> input) const;
  // Z = concat(v_cls, E_v, v_sep, E_t) + E_pos. Ids beyond max_text_length
  // are dropped. PAD ids are excluded from attention.
  Matrix<T> assemble_sequence(const Matrix<T>& vision_tokens, std::span<const std::int32_t> ids) const;
  SequenceState<T> encode(std::span<const T> input, std::span<const std::int32_t> ids) const;

  ModelOutput<T> forward(std::span<const T> input, std::span<const std::int32_t> ids,
                         Cache* cache = nullptr) const;
  std::shared_ptr<Cache> make_cache() const;

  // Accumulates parameter gradients for d(loss)/d(cls_logit) and
  // d(loss)/d(seg_logits). Empty d_seg means zero.
  void backward(const Cache& cache, T d_cls, std::span<const T> d_seg);

  // Loads 2D filters (c_out, c_in, k, k) for an encoder stage by inflation.
  void inflate_encoder_stage(int stage, std::span<const T> weights2d);

  template <class U>
  void copy_values_from(const Model<U>& other) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& dst = params_[i].value;
      const auto& src = other.params()[i].value;
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(src[j]);
    }
  }

 private:
  struct Layout;
  ModelConfig config_;
  ParameterStore<T> params_;
  std::unique_ptr<Layout> layout_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace ctvlm
