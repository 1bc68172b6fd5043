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

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctvlm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed task descriptions, manifests, configs or batch targets.
struct SchemaError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

// A record that cannot be ingested (missing files, corrupt volumes).
struct IngestionError : Error {
  IngestionError(std::string record, const std::string& what)
      : Error(record + ": " + what), record_(std::move(record)) {}
  const std::string& record() const { return record_; }

 private:
  std::string record_;
};

// Non-finite value observed in activations, gradients or parameters.
struct NumericFault : Error {
  NumericFault(std::string where, const std::string& what)
      : Error(where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

struct UndefinedMetricError : Error {
  using Error::Error;
};

struct SelectionError : Error {
  using Error::Error;
};

struct CenteringError : Error {
  using Error::Error;
};

// Voxel grid extents. Storage everywhere is row-major with z slowest and x
// fastest: index = (z * y_extent + y) * x_extent + x.
struct Dims3 {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(x) * static_cast<std::size_t>(y) *
           static_cast<std::size_t>(z);
  }
  std::size_t index(int ix, int iy, int iz) const {
    return (static_cast<std::size_t>(iz) * y + iy) * x + ix;
  }
  bool operator==(const Dims3&) const = default;
};

std::string to_string(const Dims3& d);

}  // namespace ctvlm
