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

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgsfod/alignment.hpp"
#include "vgsfod/kernels.hpp"
#include "vgsfod/rng.hpp"
#include "vgsfod/tensor.hpp"

namespace vgsfod {

// Proposal classifier standing in for the detector: a per-cell linear
// backbone d0 -> d' (optional ReLU), ROI-align pooling of each proposal, and
// a linear classifier d' -> C+1 with background last.
struct ToyDetector {
  Matrix backbone_w;  // d' x d0
  Vector backbone_b;  // d'
  Matrix cls_w;       // (C+1) x d'
  Vector cls_b;       // C+1
  bool relu = false;

  static ToyDetector init(int in_channels, int query_dim, int num_classes, Rng& rng,
                          bool relu = false);
  static ToyDetector zeros_like(const ToyDetector& d);

  int num_classes() const { return static_cast<int>(cls_w.rows()) - 1; }
  int query_dim() const { return static_cast<int>(backbone_w.rows()); }
  int in_channels() const { return static_cast<int>(backbone_w.cols()); }

  std::size_t parameter_count() const;
  // Flat parameter view in a fixed order (backbone_w, backbone_b, cls_w, cls_b).
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
};

struct DetectorForward {
  FeatureMap pre_activation;        // backbone output before ReLU
  std::vector<FeatureMap> levels;   // native and 2x2 average-pooled
  std::vector<RoiPlan> plans;       // one per kept proposal
  std::vector<std::size_t> kept;    // proposal indices that could be pooled
  std::vector<std::size_t> skipped; // degenerate proposals
  Matrix queries;                   // kept x d'
  Matrix logits;                    // kept x (C+1)

  // Foreground logits only, as the alignment module expects.
  QueryBatch query_batch() const;
};

DetectorForward forward(const ToyDetector& det, const FeatureMap& input,
                        std::span<const Box> proposals, int bins = kDefaultRoiBins);

// Averages non-overlapping 2x2 blocks (odd trailing row/column dropped).
FeatureMap avg_pool2x2(const FeatureMap& map);

// Accumulates parameter gradients into `grad` from gradients w.r.t. logits,
// optionally w.r.t. queries and the pyramid levels.
void backward(const ToyDetector& det, const FeatureMap& input, const DetectorForward& fwd,
              const Matrix& grad_logits, const Matrix* grad_queries,
              const std::vector<FeatureMap>* grad_levels, ToyDetector& grad);

struct LossValue {
  double value = 0;
  Matrix grad;  // d loss / d logits
};

// Mean softmax cross-entropy over rows. Targets index 0..C (C = background).
LossValue detection_loss(const Matrix& logits, std::span<const int> targets);

// theta_t <- alpha theta_t + (1 - alpha) theta_s, element-wise.
void ema_update(std::span<double> teacher, std::span<const double> student, double alpha);
void ema_update(ToyDetector& teacher, const ToyDetector& student, double alpha);

nlohmann::json detector_to_json(const ToyDetector& d);
ToyDetector detector_from_json(const nlohmann::json& j);

// FNV-1a over the raw parameter bytes, as 16 hex digits.
std::string parameter_hash(std::span<const double> params);

}  // namespace vgsfod
