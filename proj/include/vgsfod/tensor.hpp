// Copyright 2026 The vgsfod Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace vgsfod {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

// Dense H x W x C grid stored row-major as (h, w, c). `stride` is the number
// of image pixels covered by one cell along each axis.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  double stride = 1.0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int height, int width, int channels, double stride);
  FeatureMap(int height, int width, int channels, double stride,
             std::vector<double> data);

  std::size_t cells() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  std::size_t index(int h, int w) const {
    return (static_cast<std::size_t>(h) * width + w) * channels;
  }
  std::span<double> cell(int h, int w) {
    return {data.data() + index(h, w), static_cast<std::size_t>(channels)};
  }
  std::span<const double> cell(int h, int w) const {
    return {data.data() + index(h, w), static_cast<std::size_t>(channels)};
  }
  // (H*W) x C view with one row per cell.
  Eigen::Map<Matrix> as_matrix() {
    return {data.data(), static_cast<Eigen::Index>(cells()), channels};
  }
  Eigen::Map<const Matrix> as_matrix() const {
    return {data.data(), static_cast<Eigen::Index>(cells()), channels};
  }

  // Throws ValidationError on shape mismatch, non-finite data or stride <= 0.
  void validate() const;
};

// Corner-format box in image pixels, origin top-left.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool valid() const;
  friend bool operator==(const Box&, const Box&) = default;
};

}  // namespace vgsfod
