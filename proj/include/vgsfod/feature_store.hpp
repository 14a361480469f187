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

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgsfod/prototype_set.hpp"
#include "vgsfod/tensor.hpp"

namespace vgsfod {

inline constexpr std::uint32_t kFeatureMapVersion = 1;
inline constexpr std::size_t kFeatureMapHeaderBytes = 24;
inline constexpr int kSchemaVersion = 1;

// Box + class + optional confidence. Without a score it is a ground-truth
// annotation. class_id == num_classes denotes background.
struct Detection {
  Box box;
  int class_id = 0;
  std::optional<double> score;
};

enum class Split { kLabeled, kUnlabeled, kEval };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

struct ImageRecord {
  std::string image_id;
  std::filesystem::path feature_file;  // stored VFM map
  std::filesystem::path input_file;    // detector input map; may be empty
  int width_px = 0;
  int height_px = 0;
  double stride = 1.0;
};

using DetectionsById = std::map<std::string, std::vector<Detection>>;

struct DatasetIndex {
  int num_classes = 0;
  std::filesystem::path root;       // directory the index was loaded from
  std::vector<ImageRecord> images;  // sorted by image_id
  DetectionsById annotations;
  std::map<std::string, Split> splits;
  std::map<std::string, std::vector<Box>> proposals;
  nlohmann::json metadata = nlohmann::json::object();

  std::vector<std::string> ids(Split split) const;
  const ImageRecord& image(const std::string& id) const;
  const std::vector<Detection>& gt(const std::string& id) const;
  const std::vector<Box>& proposals_of(const std::string& id) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

// ---------------------------------------------------------------------------
// .vgfm binary feature maps
//
//   offset 0   char[4]  "VGFM"
//   offset 4   u32      version (1)
//   offset 8   u32      height
//   offset 12  u32      width
//   offset 16  u32      channels
//   offset 20  f32      stride
//   offset 24  f32[h*w*c] little-endian, row-major (h, w, c)
// ---------------------------------------------------------------------------

void write_feature_map(const std::filesystem::path& path, const FeatureMap& map);
FeatureMap read_feature_map(const std::filesystem::path& path);
std::vector<unsigned char> encode_feature_map(const FeatureMap& map);
FeatureMap decode_feature_map(const std::vector<unsigned char>& bytes);

// ---------------------------------------------------------------------------
// JSON documents
// ---------------------------------------------------------------------------

nlohmann::json box_to_json(const Box& b);
Box box_from_json(const nlohmann::json& j);
nlohmann::json detection_to_json(const Detection& d);
Detection detection_from_json(const nlohmann::json& j);

// Validates every invariant eagerly: feature files exist, splits disjoint,
// annotation ids and class ids known. Throws ValidationError listing the
// offending ids.
DatasetIndex load_dataset(const std::filesystem::path& index_path);
void write_dataset(const std::filesystem::path& index_path,
                   const DatasetIndex& index);

void write_prototypes(const std::filesystem::path& path, const PrototypeSet& p);
PrototypeSet read_prototypes(const std::filesystem::path& path);
nlohmann::json prototypes_to_json(const PrototypeSet& p);
PrototypeSet prototypes_from_json(const nlohmann::json& j);

void write_detections(const std::filesystem::path& path,
                      const DetectionsById& dets);
DetectionsById read_detections(const std::filesystem::path& path);

// JSON-lines: one object per line.
void write_jsonl(const std::filesystem::path& path,
                 const std::vector<nlohmann::json>& rows);
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

// Loads the VFM map / detector input map of an indexed image.
FeatureMap load_vfm_map(const DatasetIndex& index, const std::string& id);
FeatureMap load_input_map(const DatasetIndex& index, const std::string& id);

}  // namespace vgsfod
