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
#include <vector>

#include "json.hpp"
#include "vgsfod/prototype_set.hpp"
#include "vgsfod/rng.hpp"
#include "vgsfod/tensor.hpp"

namespace vgsfod {

// Object-query stand-ins: N feature rows with N x C foreground logits.
struct QueryBatch {
  Matrix features;  // N x d'
  Matrix logits;    // N x C

  // argmax of sigmoid(logits) per row, i.e. argmax of the logits; ties go to
  // the lowest class id.
  std::vector<int> labels() const;
};

// Row indices with predicted label c, in order.
std::vector<std::size_t> class_query_indices(const std::vector<int>& labels, int c);
Matrix collect_class_queries(const QueryBatch& batch, int c);

struct SinkhornOptions {
  double eps = 0.05;
  int max_iter = 1000;
  double tol = 1e-9;
};

// Soft assignment with rows summing to 1 and columns to N/K.
struct AssignmentMatrix {
  Matrix a;  // N x K
  bool converged = false;
  int iterations = 0;
  double max_violation = 0;  // worst marginal error at exit
};

// exp(init / eps) shifted by its max, then alternating row normalization and
// column scaling until the worst marginal error drops below tol.
AssignmentMatrix sinkhorn_assign(const Matrix& init, const SinkhornOptions& opts = {});

// Standard-normal N x K initialization drawn from `rng`.
Matrix sinkhorn_random_init(Eigen::Index n, Eigen::Index k, Rng& rng);

// K weighted means of the class queries. Components with no mass are absent.
struct ClassPrototypeBatch {
  Matrix prototypes;  // K x d'
  std::vector<bool> present;
  Vector mass;  // column sums of A
};

ClassPrototypeBatch aggregate_prototypes(const Matrix& queries, const Matrix& assignment);

// Gradient w.r.t. the queries given a gradient w.r.t. the prototypes, holding
// the assignment fixed.
Matrix aggregate_prototypes_backward(const Matrix& grad_prototypes,
                                     const Matrix& assignment,
                                     const ClassPrototypeBatch& batch);

// Three linear layers with ReLU between: d -> h -> h -> d'.
struct Mlp {
  Matrix w1, w2, w3;
  Vector b1, b2, b3;

  static Mlp init(int in, int hidden, int out, Rng& rng);
  static Mlp zeros_like(const Mlp& m);
  Matrix forward(const Matrix& x) const;
  std::size_t parameter_count() const;
};

// 1x1 convolution: per-cell linear map d' -> d plus bias.
struct ConvHead {
  Matrix weight;  // d x d'
  Vector bias;    // d

  static ConvHead init(int in, int out, Rng& rng);
  static ConvHead zeros_like(const ConvHead& c);
};

enum class SimilarityMode {
  kCosine,  // L2-normalized both sides, divided by temperature
  kRawDot,  // plain dot product
};

struct ContrastiveOptions {
  SimilarityMode mode = SimilarityMode::kCosine;
  double temperature = 0.1;
};

struct ContrastiveResult {
  double loss = 0;
  int terms = 0;                  // present batch prototypes with a present positive
  std::vector<Matrix> grad_prototypes;  // per class, K x d'
  Mlp grad_mlp;
};

// InfoNCE between batch prototypes (one ClassPrototypeBatch per foreground
// class) and the MLP-projected foreground reference prototypes. The positive
// of (i, k) is reference (i, k); the denominator runs over every present
// foreground reference prototype.
ContrastiveResult contrastive_loss(const std::vector<ClassPrototypeBatch>& batch,
                                   const PrototypeSet& reference, const Mlp& head,
                                   const ContrastiveOptions& opts = {});

// Half-pixel bilinear resize.
FeatureMap resize_bilinear(const FeatureMap& map, int height, int width);

struct ImageAlignResult {
  double loss = 0;
  std::vector<FeatureMap> grad_student;  // per level
  std::vector<ConvHead> grad_convs;      // per level
  std::size_t degenerate_cells = 0;      // zero-norm cells scored as 1
};

// Mean over levels of the mean per-cell (1 - cosine) between conv_l(student_l)
// and the VFM map resized to the level's grid.
ImageAlignResult image_alignment_loss(const std::vector<FeatureMap>& student_levels,
                                      const FeatureMap& vfm,
                                      const std::vector<ConvHead>& convs);

nlohmann::json mlp_to_json(const Mlp& m);
Mlp mlp_from_json(const nlohmann::json& j);
nlohmann::json conv_to_json(const ConvHead& c);
ConvHead conv_from_json(const nlohmann::json& j);
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);
nlohmann::json vector_to_json(const Vector& v);
Vector vector_from_json(const nlohmann::json& j);

}  // namespace vgsfod
