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

#include "vgsfod/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "vgsfod/errors.hpp"

namespace vgsfod {

using nlohmann::json;
namespace fs = std::filesystem;

const char* to_string(Split s) {
  switch (s) {
    case Split::kLabeled: return "labeled";
    case Split::kUnlabeled: return "unlabeled";
    case Split::kEval: return "eval";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "labeled") return Split::kLabeled;
  if (s == "unlabeled") return Split::kUnlabeled;
  if (s == "eval") return Split::kEval;
  throw ValidationError("unknown split name", {s});
}

std::vector<std::string> DatasetIndex::ids(Split split) const {
  std::vector<std::string> out;
  for (const auto& img : images) {
    auto it = splits.find(img.image_id);
    if (it != splits.end() && it->second == split) out.push_back(img.image_id);
  }
  return out;
}

const ImageRecord& DatasetIndex::image(const std::string& id) const {
  auto it = std::lower_bound(
      images.begin(), images.end(), id,
      [](const ImageRecord& r, const std::string& k) { return r.image_id < k; });
  if (it == images.end() || it->image_id != id)
    throw ValidationError("unknown image id", {id});
  return *it;
}

const std::vector<Detection>& DatasetIndex::gt(const std::string& id) const {
  static const std::vector<Detection> kEmpty;
  auto it = annotations.find(id);
  return it == annotations.end() ? kEmpty : it->second;
}

const std::vector<Box>& DatasetIndex::proposals_of(const std::string& id) const {
  static const std::vector<Box> kEmpty;
  auto it = proposals.find(id);
  return it == proposals.end() ? kEmpty : it->second;
}

fs::path DatasetIndex::resolve(const fs::path& p) const {
  return p.is_absolute() ? p : root / p;
}

// ---------------------------------------------------------------------------
// .vgfm

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f32(std::vector<unsigned char>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

std::uint32_t get_u32(const std::vector<unsigned char>& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
  return v;
}

float get_f32(const std::vector<unsigned char>& b, std::size_t off) {
  return std::bit_cast<float>(get_u32(b, off));
}

}  // namespace

std::vector<unsigned char> encode_feature_map(const FeatureMap& map) {
  map.validate();
  std::vector<unsigned char> out{'V', 'G', 'F', 'M'};
  out.reserve(kFeatureMapHeaderBytes + map.data.size() * 4);
  put_u32(out, kFeatureMapVersion);
  put_u32(out, static_cast<std::uint32_t>(map.height));
  put_u32(out, static_cast<std::uint32_t>(map.width));
  put_u32(out, static_cast<std::uint32_t>(map.channels));
  put_f32(out, static_cast<float>(map.stride));
  for (double v : map.data) {
    const float f = static_cast<float>(v);
    if (!std::isfinite(f))
      throw DomainError("feature value does not fit in f32");
    put_f32(out, f);
  }
  return out;
}

FeatureMap decode_feature_map(const std::vector<unsigned char>& b) {
  if (b.size() < 4 || std::memcmp(b.data(), "VGFM", 4) != 0)
    throw FormatError("bad magic, expected \"VGFM\"", 0);
  if (b.size() < kFeatureMapHeaderBytes)
    throw FormatError("truncated header", b.size());
  const std::uint32_t version = get_u32(b, 4);
  if (version != kFeatureMapVersion)
    throw FormatError("unsupported version " + std::to_string(version), 4);
  const std::uint32_t h = get_u32(b, 8), w = get_u32(b, 12), c = get_u32(b, 16);
  if (h == 0) throw FormatError("height must be positive", 8);
  if (w == 0) throw FormatError("width must be positive", 12);
  if (c == 0) throw FormatError("channels must be positive", 16);
  const float stride = get_f32(b, 20);
  if (!(stride > 0.0f) || !std::isfinite(stride))
    throw FormatError("stride must be positive and finite", 20);
  constexpr auto kIntMax = static_cast<std::uint64_t>(std::numeric_limits<int>::max());
  if (h > kIntMax || w > kIntMax || c > kIntMax)
    throw FormatError("dimension overflow", 8);
  const std::uint64_t count = std::uint64_t{h} * w;
  if (count > std::numeric_limits<std::uint64_t>::max() / c / 4)
    throw FormatError("dimension overflow", 8);
  const std::uint64_t elems = count * c;
  const std::uint64_t payload = b.size() - kFeatureMapHeaderBytes;
  if (payload < elems * 4)
    throw FormatError("truncated payload: expected " + std::to_string(elems * 4) +
                          " bytes, found " + std::to_string(payload),
                      b.size());
  if (payload > elems * 4)
    throw FormatError("trailing bytes after payload",
                      kFeatureMapHeaderBytes + elems * 4);

  std::vector<double> data(elems);
  for (std::uint64_t i = 0; i < elems; ++i) {
    const std::size_t off = kFeatureMapHeaderBytes + i * 4;
    const float f = get_f32(b, off);
    if (!std::isfinite(f)) throw FormatError("non-finite value", off);
    data[i] = f;
  }
  return FeatureMap(static_cast<int>(h), static_cast<int>(w),
                    static_cast<int>(c), static_cast<double>(stride),
                    std::move(data));
}

void write_feature_map(const fs::path& path, const FeatureMap& map) {
  const auto bytes = encode_feature_map(map);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

FeatureMap read_feature_map(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open feature map: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  try {
    return decode_feature_map(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.message(), e.offset());
  }
}

// ---------------------------------------------------------------------------
// JSON helpers

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f << j.dump(1) << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what(), e.byte);
  }
}

void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  for (const auto& r : rows) f << r.dump() << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path.string());
  std::vector<json> rows;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(f, line)) {
    if (!line.empty()) {
      try {
        rows.push_back(json::parse(line));
      } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what(), offset + e.byte);
      }
    }
    offset += line.size() + 1;
  }
  return rows;
}

json box_to_json(const Box& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4)
    throw ValidationError("box must be an array [x1, y1, x2, y2]");
  Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
        j[3].get<double>()};
  if (!b.valid()) throw ValidationError("invalid box (need x2 > x1, y2 > y1)");
  return b;
}

json detection_to_json(const Detection& d) {
  json j{{"box", box_to_json(d.box)}, {"class_id", d.class_id}};
  if (d.score) j["score"] = *d.score;
  return j;
}

Detection detection_from_json(const json& j) {
  Detection d;
  d.box = box_from_json(j.at("box"));
  d.class_id = j.at("class_id").get<int>();
  if (j.contains("score")) {
    d.score = j["score"].get<double>();
    if (!(*d.score >= 0.0 && *d.score <= 1.0))
      throw ValidationError("detection score outside [0, 1]");
  }
  return d;
}

namespace {

void check_schema(const json& j, const std::string& what) {
  if (!j.is_object()) throw ValidationError(what + ": expected a JSON object");
  if (!j.contains("schema_version") ||
      j["schema_version"].get<int>() != kSchemaVersion)
    throw ValidationError(what + ": unsupported or missing schema_version");
}

}  // namespace

// ---------------------------------------------------------------------------
// Dataset index

DatasetIndex load_dataset(const fs::path& index_path) {
  const json j = read_json(index_path);
  check_schema(j, "index");
  DatasetIndex idx;
  idx.root = index_path.parent_path();
  try {
    idx.num_classes = j.at("num_classes").get<int>();
    if (idx.num_classes <= 0)
      throw ValidationError("num_classes must be positive");

    std::set<std::string> seen;
    std::vector<std::string> dup_ids, missing_files;
    for (const auto& im : j.at("images")) {
      ImageRecord r;
      r.image_id = im.at("image_id").get<std::string>();
      r.feature_file = im.at("feature_file").get<std::string>();
      if (im.contains("input_file"))
        r.input_file = im["input_file"].get<std::string>();
      r.width_px = im.at("width").get<int>();
      r.height_px = im.at("height").get<int>();
      r.stride = im.at("stride").get<double>();
      if (r.width_px <= 0 || r.height_px <= 0 || !(r.stride > 0))
        throw ValidationError("image geometry must be positive", {r.image_id});
      if (!seen.insert(r.image_id).second) dup_ids.push_back(r.image_id);
      if (!fs::exists(idx.resolve(r.feature_file)) ||
          (!r.input_file.empty() && !fs::exists(idx.resolve(r.input_file))))
        missing_files.push_back(r.image_id);
      idx.images.push_back(std::move(r));
    }
    if (!dup_ids.empty()) throw ValidationError("duplicate image ids", dup_ids);
    if (!missing_files.empty())
      throw ValidationError("missing feature file", missing_files);
    std::sort(idx.images.begin(), idx.images.end(),
              [](const auto& a, const auto& b) { return a.image_id < b.image_id; });

    std::vector<std::string> unknown_images, bad_classes;
    if (j.contains("annotations")) {
      for (const auto& [id, list] : j["annotations"].items()) {
        if (!seen.count(id)) unknown_images.push_back(id);
        auto& dst = idx.annotations[id];
        for (const auto& a : list) {
          Detection d = detection_from_json(a);
          if (d.class_id < 0 || d.class_id >= idx.num_classes)
            bad_classes.push_back(id + ":" + std::to_string(d.class_id));
          dst.push_back(d);
        }
      }
    }
    if (j.contains("proposals")) {
      for (const auto& [id, list] : j["proposals"].items()) {
        if (!seen.count(id)) unknown_images.push_back(id);
        auto& dst = idx.proposals[id];
        for (const auto& b : list) dst.push_back(box_from_json(b));
      }
    }
    if (!unknown_images.empty())
      throw ValidationError("annotations reference unknown image ids",
                            unknown_images);
    if (!bad_classes.empty())
      throw ValidationError("unknown class id", bad_classes);

    std::vector<std::string> overlap, unknown_split;
    for (const auto& [name, ids] : j.at("splits").items()) {
      const Split s = split_from_string(name);
      for (const auto& idj : ids) {
        const auto id = idj.get<std::string>();
        if (!seen.count(id)) unknown_split.push_back(id);
        if (!idx.splits.emplace(id, s).second) overlap.push_back(id);
      }
    }
    if (!overlap.empty())
      throw ValidationError("image ids appear in more than one split", overlap);
    if (!unknown_split.empty())
      throw ValidationError("splits reference unknown image ids", unknown_split);
    if (j.contains("metadata")) idx.metadata = j["metadata"];
  } catch (const json::exception& e) {
    throw ValidationError(std::string("index: ") + e.what());
  }
  return idx;
}

void write_dataset(const fs::path& index_path, const DatasetIndex& idx) {
  json images = json::array();
  for (const auto& r : idx.images) {
    json im{{"image_id", r.image_id},
            {"feature_file", r.feature_file.generic_string()},
            {"width", r.width_px},
            {"height", r.height_px},
            {"stride", r.stride}};
    if (!r.input_file.empty()) im["input_file"] = r.input_file.generic_string();
    images.push_back(std::move(im));
  }
  json ann = json::object();
  for (const auto& [id, list] : idx.annotations) {
    json a = json::array();
    for (const auto& d : list) a.push_back(detection_to_json(d));
    ann[id] = std::move(a);
  }
  json props = json::object();
  for (const auto& [id, list] : idx.proposals) {
    json a = json::array();
    for (const auto& b : list) a.push_back(box_to_json(b));
    props[id] = std::move(a);
  }
  json splits = json::object();
  for (Split s : {Split::kLabeled, Split::kUnlabeled, Split::kEval})
    splits[to_string(s)] = idx.ids(s);
  write_json(index_path, json{{"schema_version", kSchemaVersion},
                              {"num_classes", idx.num_classes},
                              {"images", std::move(images)},
                              {"annotations", std::move(ann)},
                              {"proposals", std::move(props)},
                              {"splits", std::move(splits)},
                              {"metadata", idx.metadata}});
}

FeatureMap load_vfm_map(const DatasetIndex& index, const std::string& id) {
  return read_feature_map(index.resolve(index.image(id).feature_file));
}

FeatureMap load_input_map(const DatasetIndex& index, const std::string& id) {
  const auto& r = index.image(id);
  if (r.input_file.empty())
    throw ValidationError("image has no detector input map", {id});
  return read_feature_map(index.resolve(r.input_file));
}

// ---------------------------------------------------------------------------
// Prototypes

void PrototypeSet::validate() const {
  if (channels <= 0 || components <= 0 || num_classes <= 0)
    throw ValidationError("prototype set dimensions must be positive");
  std::vector<std::string> missing;
  for (int c = 0; c <= num_classes; ++c) {
    const bool found = c < static_cast<int>(classes.size()) &&
                       classes[static_cast<std::size_t>(c)].class_id == c;
    if (!found)
      missing.push_back(c == num_classes ? "background" : std::to_string(c));
  }
  if (!missing.empty() || classes.size() != static_cast<std::size_t>(num_classes) + 1)
    throw ValidationError("prototype set is missing classes", missing);
  for (const auto& cp : classes) {
    if (!cp.present) continue;
    if (cp.centroids.rows() != components || cp.centroids.cols() != channels ||
        cp.counts.size() != static_cast<std::size_t>(components))
      throw ValidationError("prototype shape mismatch",
                            {std::to_string(cp.class_id)});
    if (!cp.centroids.allFinite())
      throw ValidationError("non-finite centroid", {std::to_string(cp.class_id)});
  }
}

json prototypes_to_json(const PrototypeSet& p) {
  p.validate();
  json classes = json::array();
  for (const auto& cp : p.classes) {
    json c{{"class_id", cp.class_id},
           {"background", cp.class_id == p.num_classes},
           {"present", cp.present}};
    if (cp.present) {
      json rows = json::array();
      for (Eigen::Index r = 0; r < cp.centroids.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index k = 0; k < cp.centroids.cols(); ++k)
          row.push_back(cp.centroids(r, k));
        rows.push_back(std::move(row));
      }
      c["centroids"] = std::move(rows);
      c["counts"] = cp.counts;
      c["duplicates"] = cp.duplicates;
    }
    classes.push_back(std::move(c));
  }
  return json{{"schema_version", kSchemaVersion},
              {"channels", p.channels},
              {"components", p.components},
              {"num_classes", p.num_classes},
              {"classes", std::move(classes)},
              {"metadata", p.metadata}};
}

PrototypeSet prototypes_from_json(const json& j) {
  check_schema(j, "prototypes");
  PrototypeSet p;
  try {
    p.channels = j.at("channels").get<int>();
    p.components = j.at("components").get<int>();
    p.num_classes = j.at("num_classes").get<int>();
    for (const auto& c : j.at("classes")) {
      ClassPrototypes cp;
      cp.class_id = c.at("class_id").get<int>();
      cp.present = c.at("present").get<bool>();
      if (cp.present) {
        const auto& rows = c.at("centroids");
        cp.centroids = Matrix(static_cast<Eigen::Index>(rows.size()),
                              rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
          if (rows[r].size() != static_cast<std::size_t>(cp.centroids.cols()))
            throw ValidationError("ragged centroid matrix",
                                  {std::to_string(cp.class_id)});
          for (std::size_t k = 0; k < rows[r].size(); ++k)
            cp.centroids(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
                rows[r][k].get<double>();
        }
        cp.counts = c.at("counts").get<std::vector<std::size_t>>();
        cp.duplicates = c.value("duplicates", false);
      }
      p.classes.push_back(std::move(cp));
    }
    std::sort(p.classes.begin(), p.classes.end(),
              [](const auto& a, const auto& b) { return a.class_id < b.class_id; });
    if (j.contains("metadata"))
      p.metadata = j["metadata"].get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("prototypes: ") + e.what());
  }
  p.validate();
  return p;
}

void write_prototypes(const fs::path& path, const PrototypeSet& p) {
  write_json(path, prototypes_to_json(p));
}

PrototypeSet read_prototypes(const fs::path& path) {
  return prototypes_from_json(read_json(path));
}

// ---------------------------------------------------------------------------
// Detections

void write_detections(const fs::path& path, const DetectionsById& dets) {
  json images = json::object();
  for (const auto& [id, list] : dets) {
    json a = json::array();
    for (const auto& d : list) a.push_back(detection_to_json(d));
    images[id] = std::move(a);
  }
  write_json(path, json{{"schema_version", kSchemaVersion},
                        {"detections", std::move(images)}});
}

DetectionsById read_detections(const fs::path& path) {
  const json j = read_json(path);
  check_schema(j, "detections");
  DetectionsById out;
  try {
    for (const auto& [id, list] : j.at("detections").items()) {
      auto& dst = out[id];  // images without detections stay present
      for (const auto& d : list) dst.push_back(detection_from_json(d));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("detections: ") + e.what());
  }
  return out;
}

}  // namespace vgsfod
