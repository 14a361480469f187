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
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgsfod/feature_store.hpp"
#include "vgsfod/rng.hpp"
#include "vgsfod/tensor.hpp"

namespace vgsfod {

struct ShiftConfig {
  double rotation = 0.0;     // radians, applied in floor(d0/2) random planes
  double noise_sigma = 0.0;  // additive Gaussian noise on the shifted map
};

struct AugmentConfig {
  double noise_sigma = 0.2;
  double drop_rate = 0.1;  // probability that a channel is zeroed
};

struct ProposalConfig {
  double jitter_sigma = 0.1;  // relative to box size
  int negatives_per_image = 4;
};

// Every knob of a synthetic feature world. Sizes are in cells unless noted.
struct WorldConfig {
  int num_images = 200;  // labeled + unlabeled
  int num_eval_images = 100;
  int grid_height = 16;
  int grid_width = 16;
  double stride = 8.0;  // pixels per cell
  int base_channels = 8;
  int vfm_channels = 32;
  int num_classes = 3;
  int objects_min = 2;
  int objects_max = 4;
  int box_min = 3;
  int box_max = 6;
  // Pairwise cosine of class signatures must be <= 1 - margin. Values >= 1
  // request mutually orthogonal signatures.
  double separation_margin = 1.0;
  int modes_per_class = 2;
  double mode_spread = 0.5;
  double signal_amplitude = 1.0;
  double object_noise = 0.6;
  double background_level = 0.4;
  double background_noise = 0.6;
  ShiftConfig shift{0.8, 0.4};
  double labeled_fraction = 0.05;
  ProposalConfig proposals;
  AugmentConfig augment;
  std::uint64_t seed = 1;

  // Throws ValidationError naming the offending fields.
  void validate() const;
  int labeled_count() const;
  int width_px() const;
  int height_px() const;
};

// The standard world with a stronger channel rotation and input noise.
WorldConfig high_shift_config(std::uint64_t seed = 1);

nlohmann::json world_config_to_json(const WorldConfig& cfg);
// Unknown keys are rejected; missing keys keep their defaults.
WorldConfig world_config_from_json(const nlohmann::json& j);

// Channel rotation R (orthogonal, d0 x d0) plus additive noise level.
struct ShiftModel {
  Matrix rotation;
  double noise_sigma = 0.0;
};

ShiftModel make_shift_model(int channels, const ShiftConfig& cfg,
                            std::uint64_t seed);

// R x + N(0, sigma^2) per cell. Noise comes from `rng`.
FeatureMap apply_shift(const FeatureMap& map, const ShiftModel& shift, Rng& rng);

// Additive noise plus channel dropout. The weak view is the identity.
FeatureMap strong_augment(const FeatureMap& map, const AugmentConfig& cfg,
                          Rng& rng);

// Per-cell linear map: out = map * W^T (+ bias).
FeatureMap apply_channel_map(const FeatureMap& map, const Matrix& weight);
FeatureMap apply_channel_map(const FeatureMap& map, const Matrix& weight,
                             const Vector& bias);

struct WorldImage {
  std::string id;
  Split split = Split::kUnlabeled;
  FeatureMap base;   // unshifted base map X
  FeatureMap vfm;    // G X, the stored VFM map
  FeatureMap input;  // shifted detector input
  std::vector<Detection> gt;
  std::vector<int> modes;  // signature mode per gt object
  std::vector<Box> proposals;
};

enum class WorldRole {
  kTarget,  // shifted domain, the adaptation target
  kSource,  // unshifted domain with the same signatures
};

struct World {
  WorldConfig cfg;
  WorldRole role = WorldRole::kTarget;
  Matrix class_signatures;  // C x d0, unit rows
  std::vector<Matrix> mode_signatures;  // per class: modes x d0, unit rows
  Vector background_signature;          // d0, unit
  Matrix vfm_projection;                // d x d0
  ShiftModel shift;
  std::vector<WorldImage> images;  // train images first, then eval

  std::vector<const WorldImage*> split(Split s) const;
  const WorldImage& image(const std::string& id) const;
  // VFM-space signature of class c (G s_c), for diagnostics.
  Vector vfm_signature(int c) const;
};

World generate_world(const WorldConfig& cfg, WorldRole role = WorldRole::kTarget,
                     int workers = 1);

// Writes `<id>.vgfm` (VFM map), `<id>.input.vgfm` (detector input) and
// index.json under `dir`. Returns the index as written.
DatasetIndex write_world(const World& world, const std::filesystem::path& dir);

// Seeded Fisher-Yates over image ids; the first labeled_count() are labeled.
std::vector<int> split_permutation(int num_images, std::uint64_t seed);

}  // namespace vgsfod
