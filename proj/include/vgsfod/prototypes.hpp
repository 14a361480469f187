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
#include <vector>

#include "vgsfod/feature_store.hpp"
#include "vgsfod/kernels.hpp"
#include "vgsfod/prototype_set.hpp"
#include "vgsfod/rng.hpp"

namespace vgsfod {

// Pooled VFM instance features, one bag per class id 0..C (C = background).
struct InstanceFeatureBag {
  int channels = 0;
  std::vector<std::vector<std::vector<double>>> per_class;
  std::size_t skipped_degenerate = 0;

  Matrix as_matrix(int class_id) const;
};

// One labeled image as seen by the offline stage.
struct LabeledImage {
  const FeatureMap* vfm = nullptr;
  const std::vector<Detection>* gt = nullptr;
  double width_px = 0;
  double height_px = 0;
};

InstanceFeatureBag pool_instances(std::span<const LabeledImage> images,
                                  int num_classes, int bins);

// Loads the VFM map of every labeled image and ROI-aligns its GT boxes.
// Only the labeled split is touched.
InstanceFeatureBag pool_labeled_instances(const DatasetIndex& index, int bins);

// Mirrors every GT box about the vertical centerline, the horizontal
// centerline and both (point reflection), clamps to the image, and drops
// candidates with IoU >= iou_max against any GT box.
std::vector<Box> synthesize_background_boxes(const std::vector<Detection>& gt,
                                             double image_width,
                                             double image_height,
                                             double iou_max);

inline constexpr double kDefaultBackgroundIou = 0.3;

struct KMeansOptions {
  int k = kDefaultComponents;
  int max_iter = 100;
  double tol = 1e-10;  // stop when no centroid moves further than this
  int restarts = 8;    // best-of-n k-means++ seedings
};

struct KMeansResult {
  Matrix centroids;  // K x d
  std::vector<int> labels;
  std::vector<std::size_t> counts;
  double objective = 0;  // sum of squared distances to assigned centroids
  // Objective after each assignment step of the returned run.
  std::vector<double> objective_history;
  int iterations = 0;
  bool converged = false;
  // Fewer distinct vectors than K: some centroids coincide.
  bool duplicates = false;
};

// One k-means++ seeding followed by Lloyd iterations, then single-point
// transfer passes. Empty clusters are re-seeded at the point farthest from
// its centroid.
KMeansResult kmeans_single(const Matrix& vectors, int k, Rng& rng,
                           int max_iter, double tol);

// Best of `restarts` runs by objective. Throws DomainError on empty input or
// k < 1.
KMeansResult kmeans(const Matrix& vectors, const KMeansOptions& opts, Rng& rng);

double kmeans_objective(const Matrix& vectors, const Matrix& centroids,
                        const std::vector<int>& labels);

struct ExtractOptions {
  int k = kDefaultComponents;
  int bins = kDefaultRoiBins;
  double bg_iou = kDefaultBackgroundIou;
  std::uint64_t seed = 0;
  int max_iter = 100;
  int restarts = 8;
};

PrototypeSet extract_prototypes(std::span<const LabeledImage> images,
                                int num_classes, const ExtractOptions& opts);
PrototypeSet extract_prototypes(const DatasetIndex& index,
                                const ExtractOptions& opts);

}  // namespace vgsfod
