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
#include <utility>
#include <vector>

#include "vgsfod/tensor.hpp"

namespace vgsfod {

inline constexpr int kDefaultRoiBins = 7;

// Bilinear blend of the four cells around (x, y), in cell coordinates where
// cell (h, w) has its center at (x = w, y = h). Throws DomainError when the
// point lies outside [0, width-1] x [0, height-1] or is not finite.
std::vector<double> bilinear_sample(const FeatureMap& map, double x, double y);

// Linear pooling operator produced by laying a bins x bins grid over a box
// and sampling each bin at 2x2 interior points. Stored as (cell, weight)
// pairs over the flattened H*W grid; weights sum to 1.
struct RoiPlan {
  std::vector<std::pair<std::size_t, double>> taps;
};

// Pixel boxes map to cell coordinates as (p / stride - 0.5), then clamp to
// the grid. Throws DegenerateError for boxes under 1e-6 cells of area and
// DomainError for boxes entirely outside the map.
RoiPlan make_roi_plan(int height, int width, double stride, const Box& box,
                      int bins = kDefaultRoiBins);

// Applies a plan to a map: returns the pooled C-vector.
std::vector<double> apply_roi_plan(const FeatureMap& map, const RoiPlan& plan);
void apply_roi_plan(const FeatureMap& map, const RoiPlan& plan,
                    std::span<double> out);

// Adjoint of apply_roi_plan: grad_map += plan^T * grad_out.
void scatter_roi_plan(const RoiPlan& plan, std::span<const double> grad_out,
                      FeatureMap& grad_map);

// ROI Align to one d-vector per box: the mean over all bins.
std::vector<double> roi_align(const FeatureMap& map, const Box& box,
                              int bins = kDefaultRoiBins);

// Throws DegenerateError when either norm is below 1e-12.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

double iou(const Box& a, const Box& b);

std::vector<double> softmax(std::span<const double> v);
double sigmoid(double x);
double log_sum_exp(std::span<const double> v);

}  // namespace vgsfod
