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
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgsfod/feature_store.hpp"
#include "vgsfod/kernels.hpp"
#include "vgsfod/prototype_set.hpp"

namespace vgsfod {

enum class ThresholdMode { kFixed, kDynamic };

inline constexpr double kDefaultTauLow = 0.3;
inline constexpr double kDefaultSimThreshold = 0.5;

struct MiningConfig {
  double tau_low = kDefaultTauLow;
  ThresholdMode mode = ThresholdMode::kDynamic;
  double tau_high_fixed = 0.7;  // used in kFixed mode
  // Mid-band predictions need best-prototype cosine >= sim_threshold.
  // A value above 1 turns mining off (plain dual-threshold filter).
  double sim_threshold = kDefaultSimThreshold;
  // Dynamic upper threshold.
  double beta = 0.99;
  double tau_init = 0.7;
  double clamp_margin = 0.1;  // lower clamp is tau_low + clamp_margin
  double clamp_high = 0.95;
  int bins = kDefaultRoiBins;

  double clamp_low() const { return tau_low + clamp_margin; }
  void validate() const;
};

// Accepts exactly the predictions with score >= tau, without mining.
MiningConfig fixed_threshold_config(double tau);

struct DynamicThresholdState {
  double tau_high = 0.7;
  double accumulator = 0.7;  // last unclamped EMA value
  std::size_t updates = 0;
};

DynamicThresholdState init_threshold_state(const MiningConfig& cfg);

// tau_high <- clamp(beta * tau_high + (1 - beta) * mean(s > tau_low)).
// Batches without a qualifying score leave the state unchanged.
DynamicThresholdState update_dynamic_threshold(const DynamicThresholdState& state,
                                               std::span<const double> scores,
                                               const MiningConfig& cfg);

double effective_tau_high(const MiningConfig& cfg, const DynamicThresholdState& s);

enum class Provenance { kDirect, kMined };
enum class RejectReason { kBelowLow, kSimFail, kClassMismatch, kBgMatch };

const char* to_string(Provenance p);
const char* to_string(RejectReason r);

struct MinedDetection {
  Detection det;
  Provenance tag = Provenance::kDirect;
  std::size_t source_index = 0;  // position in the input prediction list
  double similarity = 0;         // best prototype cosine; 0 for direct
  int matched_class = -1;        // argmax class; -1 for direct
};

struct Rejection {
  std::size_t source_index = 0;
  RejectReason reason = RejectReason::kBelowLow;
  bool absent_prototypes = false;
};

struct RejectionCounts {
  std::size_t below_low = 0;
  std::size_t sim_fail = 0;
  std::size_t class_mismatch = 0;
  std::size_t bg_match = 0;
  std::size_t absent_prototypes = 0;  // subset of sim_fail

  RejectionCounts& operator+=(const RejectionCounts& o);
  std::size_t total() const { return below_low + sim_fail + class_mismatch + bg_match; }
};

// Outcome of mining one image. Every input prediction lands in exactly one
// of `accepted` or `rejected`.
struct MinedLabelSet {
  std::vector<MinedDetection> accepted;
  std::vector<Rejection> rejected;
  RejectionCounts counts;
  std::size_t similarity_queries = 0;  // prototype comparisons performed
  std::size_t degenerate = 0;          // mid-band boxes that could not be pooled

  std::vector<Detection> accepted_detections() const;
};

// Dual-threshold filter with VFM-prototype adjudication of the mid band.
// `tau_high` is the upper threshold in force for this image.
MinedLabelSet mine(std::span<const Detection> predictions, const FeatureMap& vfm_map,
                   const PrototypeSet& protos, const MiningConfig& cfg, double tau_high);

// Best prototype (class, component, cosine) for a pooled feature. Ties go to
// the lowest class id, then the lowest component. Absent classes are skipped.
struct PrototypeMatch {
  int class_id = -1;
  int component = -1;
  double similarity = -1;
};
PrototypeMatch best_prototype(std::span<const double> feature, const PrototypeSet& protos);

// Per-cell cosine between the pooled reference box and every cell.
Matrix similarity_map(const FeatureMap& vfm_map, const Box& reference,
                      int bins = kDefaultRoiBins);

struct MatchCounts {
  std::size_t true_positives = 0;
  std::size_t predictions = 0;
  std::size_t ground_truth = 0;
  MatchCounts& operator+=(const MatchCounts& o);
};

// Greedy by descending score: a prediction is a true positive iff its class
// matches and IoU >= iou_thr with a not-yet-matched GT box (best IoU wins).
MatchCounts match_detections(std::span<const Detection> preds,
                             std::span<const Detection> gt, double iou_thr = 0.5);

struct MiningReport {
  double precision = 1;  // 1 by convention when nothing is accepted
  double recall = 0;
  double f1 = 0;
  MatchCounts matches;
  RejectionCounts rejections;
  std::size_t direct = 0;
  std::size_t mined = 0;
  std::size_t similarity_queries = 0;

  nlohmann::json to_json() const;
};

MiningReport summarize_matches(const MatchCounts& m);

MiningReport mining_report(const std::map<std::string, MinedLabelSet>& mined,
                           const DetectionsById& gt, double iou_thr = 0.5);

// Mines images in sorted id order, `batch_size` at a time; the dynamic
// threshold is updated after each batch from that batch's scores.
struct DatasetMiningResult {
  std::map<std::string, MinedLabelSet> per_image;
  DynamicThresholdState final_state;
  std::vector<double> tau_trace;  // tau_high used for each batch
};

DatasetMiningResult mine_dataset(
    const DetectionsById& predictions,
    const std::function<FeatureMap(const std::string&)>& load_vfm,
    const PrototypeSet& protos, const MiningConfig& cfg,
    DynamicThresholdState state, std::size_t batch_size = 4);

nlohmann::json mined_to_json(const std::map<std::string, MinedLabelSet>& mined);

}  // namespace vgsfod
