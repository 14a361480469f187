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
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vgsfod/alignment.hpp"
#include "vgsfod/mining.hpp"
#include "vgsfod/prototype_set.hpp"
#include "vgsfod/prototypes.hpp"
#include "vgsfod/synth_world.hpp"
#include "vgsfod/toy_detector.hpp"

namespace vgsfod {

enum class TrainMode {
  kSourceFree,  // unlabeled target data only, confidence-threshold pseudo-labels
  kMtSemi,      // + labeled loss, fixed-threshold pseudo-labels
  kVpm,         // + VFM-guided mining with the dynamic threshold
  kFullVg,      // + instance and image alignment losses
};

const char* to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

enum class SinkhornInit {
  kRandom,    // standard-normal logits
  kAffinity,  // cosine to a running mean per (class, component)
};

struct TrainerConfig {
  TrainMode mode = TrainMode::kFullVg;
  double alpha = 0.999;
  double lr = 0.05;
  int steps = 2000;
  int batch_size = 4;
  double lambda_con = 0.1;
  double lambda_sim = 1.0;
  double unsup_weight = 1.0;
  MiningConfig mining;
  // Fixed threshold used by the plain mean-teacher modes.
  double fixed_tau = 0.7;
  std::uint64_t seed = 1;

  int query_dim = 16;
  int mlp_hidden = 0;  // 0 means query_dim
  bool relu = false;
  int bins = kDefaultRoiBins;
  int eval_every = 50;
  int source_steps = 400;
  double source_lr = 0.1;
  int head_steps = 400;  // alignment-head fit after source pre-training
  // Scales the step size of the MLP and conv heads during adaptation; 0
  // freezes them so the alignment losses only move the detector.
  double head_lr_scale = 0.0;
  ExtractOptions prototypes;
  SinkhornOptions sinkhorn;
  SinkhornInit sinkhorn_init = SinkhornInit::kRandom;
  ContrastiveOptions contrastive;
  int workers = 1;
  // Where a NaN abort writes its diagnostic dump; empty disables the file.
  std::filesystem::path dump_dir;

  void validate() const;
};

nlohmann::json trainer_config_to_json(const TrainerConfig& c);
// Unknown keys are rejected; missing keys keep their defaults.
TrainerConfig trainer_config_from_json(const nlohmann::json& j);

// One image as the trainer sees it. Pointers stay owned by the world.
struct TrainSample {
  std::string id;
  const FeatureMap* input = nullptr;
  const FeatureMap* vfm = nullptr;
  const std::vector<Detection>* gt = nullptr;
  const std::vector<Box>* proposals = nullptr;
};

struct TrainingData {
  int num_classes = 0;
  std::vector<TrainSample> labeled;
  std::vector<TrainSample> unlabeled;
  std::vector<TrainSample> eval;
};

TrainingData training_data(const World& world);
// Every image of the world as labeled data (source pre-training).
std::vector<TrainSample> all_labeled(const World& world);

// Per proposal: class of the best-overlapping GT box at IoU >= iou_thr,
// otherwise background (num_classes).
std::vector<int> proposal_targets(std::span<const Box> proposals,
                                  std::span<const Detection> gt, int num_classes,
                                  double iou_thr = 0.5);

struct StudentModel {
  ToyDetector det;
  Mlp mlp;                      // projects reference prototypes into query space
  std::vector<ConvHead> convs;  // one per pyramid level

  static StudentModel init(int in_channels, int vfm_channels, int num_classes,
                           const TrainerConfig& cfg);
  std::vector<double> flatten() const;
};

nlohmann::json checkpoint_to_json(const StudentModel& m, const ToyDetector& teacher);
// Returns the student; the teacher detector is written to `teacher` if given.
StudentModel checkpoint_from_json(const nlohmann::json& j, ToyDetector* teacher = nullptr);

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::vector<double> per_class_ap;  // NaN for classes without GT
  double map = 0;                    // mean over classes with GT
  double accuracy = 0;               // proposal classification accuracy
  std::size_t proposals = 0;

  nlohmann::json to_json() const;
};

// All-point interpolated AP of class `class_id`. Predictions are ranked by
// score (ties keep input order) and matched greedily to unmatched GT boxes
// of the same image at IoU >= iou_thr. NaN when the class has no GT.
double average_precision(const std::vector<std::vector<Detection>>& preds,
                         const std::vector<std::vector<Detection>>& gt, int class_id,
                         double iou_thr = 0.5);

// Teacher-style predictions for one image: every kept proposal whose argmax is
// foreground, scored by its softmax probability.
std::vector<Detection> predict(const ToyDetector& det, const FeatureMap& input,
                               std::span<const Box> proposals, int bins = kDefaultRoiBins,
                               bool all_proposals = false);

EvalResult evaluate(const ToyDetector& det, std::span<const TrainSample> eval,
                    int bins = kDefaultRoiBins);

// ---------------------------------------------------------------------------
// Training

struct RunRecord {
  int step = 0;
  double loss_sup = 0;
  double loss_unsup = 0;
  double loss_con = 0;
  double loss_sim = 0;
  double total = 0;
  double tau_high = 0;
  double pl_precision = 1;
  double pl_recall = 0;
  std::size_t pl_count = 0;
  std::size_t pl_direct = 0;
  std::size_t pl_mined = 0;
  std::optional<EvalResult> eval;
  std::optional<std::string> checkpoint_hash;

  nlohmann::json to_json() const;
};

struct RunLog {
  std::vector<RunRecord> records;

  std::vector<nlohmann::json> to_jsonl() const;
  // (step, mAP) for every record carrying an evaluation.
  std::vector<std::pair<int, double>> eval_trace() const;
};

struct SupervisedConfig {
  double lr = 0.05;
  int steps = 100;
  int batch_size = 4;
  std::uint64_t seed = 1;
  int bins = kDefaultRoiBins;
  AugmentConfig augment;
};

// Plain SGD on the labeled loss. Returns the per-step loss trace.
std::vector<double> train_supervised(ToyDetector& det, std::span<const TrainSample> labeled,
                                     const SupervisedConfig& cfg);

// Owns the student, the EMA teacher, the threshold state and the log.
class Trainer {
 public:
  Trainer(StudentModel student, const TrainingData& data, const PrototypeSet* protos,
          const TrainerConfig& cfg, const AugmentConfig& augment);

  // One optimization step; returns the appended record.
  const RunRecord& step();
  // Runs cfg.steps steps (with an evaluation before the first).
  void run(const std::function<void(const RunRecord&)>& on_record = {});

  const StudentModel& student() const { return student_; }
  const ToyDetector& teacher() const { return teacher_; }
  const RunLog& log() const { return log_; }
  const DynamicThresholdState& threshold() const { return threshold_; }
  int steps_done() const { return step_; }
  // Provenance of every pseudo-label target used so far: always the teacher.
  std::size_t teacher_pseudo_labels() const { return teacher_labels_; }

 private:
  StudentModel student_;
  ToyDetector teacher_;
  const TrainingData& data_;
  const PrototypeSet* protos_;
  TrainerConfig cfg_;
  AugmentConfig augment_;
  DynamicThresholdState threshold_;
  RunLog log_;
  int step_ = 0;
  int epoch_steps_ = 1;
  std::size_t teacher_labels_ = 0;
  Matrix running_means_;  // (C*K) x d' for the affinity init
  bool running_init_ = false;
};

struct StabilityReport {
  double peak = 0;
  int peak_step = 0;
  double final_value = 0;
  double drop = 0;  // (peak - final) / peak, 0 when peak is 0
  bool collapse = false;
  int collapse_step = -1;  // first eval after the peak below 0.9 * peak

  nlohmann::json to_json() const;
};

inline constexpr double kCollapseDrop = 0.10;

StabilityReport stability_report(const std::vector<std::pair<int, double>>& trace);
StabilityReport stability_report(const RunLog& log);

// ---------------------------------------------------------------------------
// End-to-end runs on a synthetic world

// Fits only the image-alignment heads (detector frozen) so that the heads map
// the detector's features onto the VFM maps of `samples`.
std::vector<double> fit_alignment_heads(StudentModel& m, std::span<const TrainSample> samples,
                                        const SupervisedConfig& cfg);

// Source-trained checkpoint: detector pre-fit on the unshifted source world
// of `world_cfg`, then alignment heads fitted on the same world.
StudentModel source_model(const WorldConfig& world_cfg, const TrainerConfig& cfg);

struct SimulationResult {
  RunLog log;
  StudentModel student;
  ToyDetector teacher;
  StabilityReport stability;
  EvalResult initial_eval;
  EvalResult final_eval;
};

SimulationResult simulate(const WorldConfig& world_cfg, const TrainerConfig& cfg,
                          const std::function<void(const RunRecord&)>& on_record = {});

// Same, on an already generated target world and source checkpoint.
SimulationResult simulate(const World& world, const StudentModel& source,
                          const TrainerConfig& cfg,
                          const std::function<void(const RunRecord&)>& on_record = {});

struct MiningBenchmarkRow {
  double tau_low = 0;
  MiningReport mined;     // dynamic upper threshold + prototype mining
  MiningReport baseline;  // everything with score >= tau_low accepted
};

// Source-model predictions on the unlabeled target images, prototypes from
// the labeled ones; one row per tau_low.
std::vector<MiningBenchmarkRow> mining_benchmark(const World& world, const ToyDetector& source,
                                                 const TrainerConfig& cfg,
                                                 std::span<const double> tau_lows);

}  // namespace vgsfod
