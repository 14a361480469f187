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
#include <map>
#include <string>
#include <vector>

#include "vgsfod/tensor.hpp"

namespace vgsfod {

inline constexpr int kDefaultComponents = 4;

// Centroids of one class (foreground or background).
struct ClassPrototypes {
  int class_id = 0;
  // False when the class had no labeled instances; mining rejects its
  // mid-band predictions.
  bool present = true;
  Matrix centroids;                 // K x d, unnormalized
  std::vector<std::size_t> counts;  // members per centroid
  // Set when the class had fewer distinct vectors than K.
  bool duplicates = false;
};

// Reference prototypes for classes 0..C-1 plus background, stored at index
// C (the background sentinel id).
struct PrototypeSet {
  int channels = 0;
  int components = kDefaultComponents;
  int num_classes = 0;
  std::vector<ClassPrototypes> classes;
  std::map<std::string, std::string> metadata;

  int background_id() const { return num_classes; }
  const ClassPrototypes& background() const { return classes.at(num_classes); }
  // Throws ValidationError when a class (including background) is missing,
  // shapes disagree, or a centroid is non-finite.
  void validate() const;
};

}  // namespace vgsfod
