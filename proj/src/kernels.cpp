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

#include "vgsfod/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vgsfod/errors.hpp"

namespace vgsfod {

FeatureMap::FeatureMap(int height, int width, int channels, double stride)
    : height(height), width(width), channels(channels), stride(stride) {
  if (height <= 0 || width <= 0 || channels <= 0 || !(stride > 0.0))
    throw DomainError("feature map dimensions and stride must be positive");
  data.assign(cells() * static_cast<std::size_t>(channels), 0.0);
}

FeatureMap::FeatureMap(int height, int width, int channels, double stride,
                       std::vector<double> values)
    : FeatureMap(height, width, channels, stride) {
  if (values.size() != data.size())
    throw DomainError("feature map data length does not match H*W*C");
  data = std::move(values);
}

void FeatureMap::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0)
    throw ValidationError("feature map dimensions must be positive");
  if (!(stride > 0.0) || !std::isfinite(stride))
    throw ValidationError("feature map stride must be positive");
  if (data.size() != cells() * static_cast<std::size_t>(channels))
    throw ValidationError("feature map data length does not match H*W*C");
  for (double v : data)
    if (!std::isfinite(v))
      throw ValidationError("feature map contains non-finite values");
}

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
         std::isfinite(y2) && x2 > x1 && y2 > y1;
}

namespace {

struct BilinearTaps {
  std::size_t cell[4];
  double weight[4];
};

BilinearTaps bilinear_taps(int height, int width, double x, double y) {
  const int x0 = std::min(static_cast<int>(std::floor(x)), width - 1);
  const int y0 = std::min(static_cast<int>(std::floor(y)), height - 1);
  const int x1 = std::min(x0 + 1, width - 1);
  const int y1 = std::min(y0 + 1, height - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  auto at = [width](int h, int w) {
    return static_cast<std::size_t>(h) * width + w;
  };
  return {{at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)},
          {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx}};
}

}  // namespace

std::vector<double> bilinear_sample(const FeatureMap& map, double x, double y) {
  if (!std::isfinite(x) || !std::isfinite(y))
    throw DomainError("bilinear_sample: non-finite coordinate");
  if (x < 0 || y < 0 || x > map.width - 1 || y > map.height - 1)
    throw DomainError("bilinear_sample: coordinate outside map");
  const BilinearTaps t = bilinear_taps(map.height, map.width, x, y);
  const auto c = static_cast<std::size_t>(map.channels);
  std::vector<double> out(c, 0.0);
  for (int k = 0; k < 4; ++k) {
    const double* v = map.data.data() + t.cell[k] * c;
    for (std::size_t i = 0; i < c; ++i) out[i] += t.weight[k] * v[i];
  }
  return out;
}

RoiPlan make_roi_plan(int height, int width, double stride, const Box& box,
                      int bins) {
  if (bins < 1) throw DomainError("roi_align: bins must be >= 1");
  if (!(stride > 0.0)) throw DomainError("roi_align: stride must be positive");
  if (!std::isfinite(box.x1) || !std::isfinite(box.y1) ||
      !std::isfinite(box.x2) || !std::isfinite(box.y2))
    throw DomainError("roi_align: non-finite box");
  const double area_cells =
      std::max(0.0, box.width()) * std::max(0.0, box.height()) /
      (stride * stride);
  if (area_cells < 1e-6) throw DegenerateError("roi_align: degenerate box");
  if (box.x2 <= 0 || box.y2 <= 0 || box.x1 >= width * stride ||
      box.y1 >= height * stride)
    throw DomainError("roi_align: box lies outside the feature map");

  auto to_cell = [stride](double p) { return p / stride - 0.5; };
  const double cx1 = std::clamp(to_cell(box.x1), 0.0, width - 1.0);
  const double cx2 = std::clamp(to_cell(box.x2), 0.0, width - 1.0);
  const double cy1 = std::clamp(to_cell(box.y1), 0.0, height - 1.0);
  const double cy2 = std::clamp(to_cell(box.y2), 0.0, height - 1.0);
  const double bin_w = (cx2 - cx1) / bins;
  const double bin_h = (cy2 - cy1) / bins;

  std::vector<double> dense(static_cast<std::size_t>(height) * width, 0.0);
  const double w_point = 1.0 / (4.0 * bins * bins);
  for (int by = 0; by < bins; ++by) {
    for (int bx = 0; bx < bins; ++bx) {
      for (int iy = 0; iy < 2; ++iy) {
        const double y = cy1 + (by + (iy + 0.5) / 2.0) * bin_h;
        for (int ix = 0; ix < 2; ++ix) {
          const double x = cx1 + (bx + (ix + 0.5) / 2.0) * bin_w;
          const BilinearTaps t = bilinear_taps(height, width, x, y);
          for (int k = 0; k < 4; ++k) dense[t.cell[k]] += w_point * t.weight[k];
        }
      }
    }
  }
  RoiPlan plan;
  for (std::size_t i = 0; i < dense.size(); ++i)
    if (dense[i] != 0.0) plan.taps.emplace_back(i, dense[i]);
  return plan;
}

void apply_roi_plan(const FeatureMap& map, const RoiPlan& plan,
                    std::span<double> out) {
  const auto c = static_cast<std::size_t>(map.channels);
  std::fill(out.begin(), out.end(), 0.0);
  for (const auto& [cell, w] : plan.taps) {
    const double* v = map.data.data() + cell * c;
    for (std::size_t i = 0; i < c; ++i) out[i] += w * v[i];
  }
}

std::vector<double> apply_roi_plan(const FeatureMap& map, const RoiPlan& plan) {
  std::vector<double> out(static_cast<std::size_t>(map.channels));
  apply_roi_plan(map, plan, out);
  return out;
}

void scatter_roi_plan(const RoiPlan& plan, std::span<const double> grad_out,
                      FeatureMap& grad_map) {
  const auto c = static_cast<std::size_t>(grad_map.channels);
  for (const auto& [cell, w] : plan.taps) {
    double* g = grad_map.data.data() + cell * c;
    for (std::size_t i = 0; i < c; ++i) g[i] += w * grad_out[i];
  }
}

std::vector<double> roi_align(const FeatureMap& map, const Box& box, int bins) {
  return apply_roi_plan(
      map, make_roi_plan(map.height, map.width, map.stride, box, bins));
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DomainError("cosine_similarity: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < 1e-12 || nb < 1e-12)
    throw DegenerateError("cosine_similarity: zero-norm vector");
  return std::clamp(dot / (na * nb), -1.0, 1.0);
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

std::vector<double> softmax(std::span<const double> v) {
  std::vector<double> out(v.size());
  if (v.empty()) return out;
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) sum += out[i] = std::exp(v[i] - m);
  for (double& x : out) x /= sum;
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -INFINITY;
  const double m = *std::max_element(v.begin(), v.end());
  double sum = 0;
  for (double x : v) sum += std::exp(x - m);
  return m + std::log(sum);
}

}  // namespace vgsfod
