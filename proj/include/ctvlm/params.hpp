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

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "ctvlm/common.hpp"

namespace ctvlm {

// SIMD-aligned storage. Eigen reductions over mapped memory peel a
// different number of leading elements depending on the address, so
// alignment keeps results bitwise reproducible across allocations.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;
  bool decay = true;  // subject to decoupled weight decay

  std::size_t size() const { return value.size(); }
};

// Named tensors in registration order. Indices are stable.
template <class T>
class ParameterStore {
 public:
  std::size_t add(std::string name, std::vector<int> shape, bool decay) {
    if (index_.contains(name)) throw SchemaError("duplicate parameter '" + name + "'");
    std::size_t n = 1;
    for (int s : shape) n *= static_cast<std::size_t>(s);
    Parameter<T> p;
    p.name = name;
    p.shape = std::move(shape);
    p.value.assign(n, T(0));
    p.grad.assign(n, T(0));
    p.decay = decay;
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Parameter<T>* find(std::string_view name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>* find(std::string_view name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<T>& at(std::string_view name) {
    if (auto* p = find(name)) return *p;
    throw SchemaError("no parameter named '" + std::string(name) + "'");
  }
  const Parameter<T>& at(std::string_view name) const {
    if (auto* p = find(name)) return *p;
    throw SchemaError("no parameter named '" + std::string(name) + "'");
  }

  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }

  std::size_t total_count() const {
    std::size_t n = 0;
    for (auto& p : params_) n += p.size();
    return n;
  }

  // Throws NumericFault naming the first tensor with a non-finite value.
  void check_finite() const {
    for (auto& p : params_)
      for (T v : p.value)
        if (!std::isfinite(v)) throw NumericFault(p.name, "non-finite parameter value");
  }

 private:
  std::vector<Parameter<T>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace ctvlm
