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

#include "vgsfod/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "vgsfod/errors.hpp"
#include "vgsfod/prototypes.hpp"

namespace vgsfod {

using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

}  // namespace

const char* to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kSourceFree: return "source_free";
    case TrainMode::kMtSemi: return "mt_semi";
    case TrainMode::kVpm: return "vpm";
    case TrainMode::kFullVg: return "full_vg";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
  for (auto m : {TrainMode::kSourceFree, TrainMode::kMtSemi, TrainMode::kVpm, TrainMode::kFullVg})
    if (s == to_string(m)) return m;
  throw ValidationError("unknown training mode", {s});
}

void TrainerConfig::validate() const {
  std::vector<std::string> bad;
  if (!(alpha >= 0 && alpha < 1)) bad.push_back("alpha");
  if (!(lr >= 0) || !std::isfinite(lr)) bad.push_back("lr");
  if (steps < 0) bad.push_back("steps");
  if (batch_size < 1) bad.push_back("batch_size");
  if (!(lambda_con >= 0)) bad.push_back("lambda_con");
  if (!(lambda_sim >= 0)) bad.push_back("lambda_sim");
  if (!(unsup_weight >= 0)) bad.push_back("unsup_weight");
  if (!(fixed_tau >= 0 && fixed_tau <= 1)) bad.push_back("fixed_tau");
  if (query_dim < 1) bad.push_back("query_dim");
  if (mlp_hidden < 0) bad.push_back("mlp_hidden");
  if (bins < 1) bad.push_back("bins");
  if (eval_every < 1) bad.push_back("eval_every");
  if (source_steps < 0) bad.push_back("source_steps");
  if (head_steps < 0) bad.push_back("head_steps");
  if (!(head_lr_scale >= 0)) bad.push_back("head_lr_scale");
  if (!(source_lr >= 0)) bad.push_back("source_lr");
  if (prototypes.k < 1) bad.push_back("prototypes.k");
  if (!(sinkhorn.eps > 0)) bad.push_back("sinkhorn.eps");
  if (!(contrastive.temperature > 0)) bad.push_back("contrastive.temperature");
  if (workers < 1) bad.push_back("workers");
  if (!bad.empty()) throw ValidationError("invalid trainer config", bad);
  mining.validate();
}

json trainer_config_to_json(const TrainerConfig& c) {
  return json{
      {"mode", to_string(c.mode)},
      {"alpha", c.alpha},
      {"lr", c.lr},
      {"steps", c.steps},
      {"batch_size", c.batch_size},
      {"lambda_con", c.lambda_con},
      {"lambda_sim", c.lambda_sim},
      {"unsup_weight", c.unsup_weight},
      {"fixed_tau", c.fixed_tau},
      {"seed", c.seed},
      {"query_dim", c.query_dim},
      {"mlp_hidden", c.mlp_hidden},
      {"relu", c.relu},
      {"bins", c.bins},
      {"eval_every", c.eval_every},
      {"source_steps", c.source_steps},
      {"source_lr", c.source_lr},
      {"head_steps", c.head_steps},
      {"head_lr_scale", c.head_lr_scale},
      {"mining",
       {{"tau_low", c.mining.tau_low},
        {"dynamic", c.mining.mode == ThresholdMode::kDynamic},
        {"tau_high_fixed", c.mining.tau_high_fixed},
        {"sim_threshold", c.mining.sim_threshold},
        {"beta", c.mining.beta},
        {"tau_init", c.mining.tau_init},
        {"clamp_margin", c.mining.clamp_margin},
        {"clamp_high", c.mining.clamp_high}}},
      {"prototypes",
       {{"k", c.prototypes.k},
        {"bg_iou", c.prototypes.bg_iou},
        {"max_iter", c.prototypes.max_iter},
        {"restarts", c.prototypes.restarts}}},
      {"sinkhorn",
       {{"eps", c.sinkhorn.eps},
        {"max_iter", c.sinkhorn.max_iter},
        {"tol", c.sinkhorn.tol},
        {"init", c.sinkhorn_init == SinkhornInit::kRandom ? "random" : "affinity"}}},
      {"contrastive",
       {{"temperature", c.contrastive.temperature},
        {"mode", c.contrastive.mode == SimilarityMode::kCosine ? "cosine" : "dot"}}},
  };
}

TrainerConfig trainer_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("trainer config must be a JSON object");
  const json defaults = trainer_config_to_json(TrainerConfig{});
  std::vector<std::string> unknown;
  for (const auto& [k, v] : j.items()) {
    if (!defaults.contains(k)) {
      unknown.push_back(k);
    } else if (defaults[k].is_object()) {
      if (!v.is_object()) {
        unknown.push_back(k);
        continue;
      }
      for (const auto& [k2, v2] : v.items())
        if (!defaults[k].contains(k2)) unknown.push_back(k + "." + k2);
    }
  }
  if (!unknown.empty()) throw ValidationError("unknown trainer config keys", unknown);
  json m = defaults;
  m.merge_patch(j);
  TrainerConfig c;
  try {
    c.mode = train_mode_from_string(m["mode"].get<std::string>());
    c.alpha = m["alpha"].get<double>();
    c.lr = m["lr"].get<double>();
    c.steps = m["steps"].get<int>();
    c.batch_size = m["batch_size"].get<int>();
    c.lambda_con = m["lambda_con"].get<double>();
    c.lambda_sim = m["lambda_sim"].get<double>();
    c.unsup_weight = m["unsup_weight"].get<double>();
    c.fixed_tau = m["fixed_tau"].get<double>();
    c.seed = m["seed"].get<std::uint64_t>();
    c.query_dim = m["query_dim"].get<int>();
    c.mlp_hidden = m["mlp_hidden"].get<int>();
    c.relu = m["relu"].get<bool>();
    c.bins = m["bins"].get<int>();
    c.eval_every = m["eval_every"].get<int>();
    c.source_steps = m["source_steps"].get<int>();
    c.source_lr = m["source_lr"].get<double>();
    c.head_steps = m["head_steps"].get<int>();
    c.head_lr_scale = m["head_lr_scale"].get<double>();
    const auto& mi = m["mining"];
    c.mining.tau_low = mi["tau_low"].get<double>();
    c.mining.mode = mi["dynamic"].get<bool>() ? ThresholdMode::kDynamic : ThresholdMode::kFixed;
    c.mining.tau_high_fixed = mi["tau_high_fixed"].get<double>();
    c.mining.sim_threshold = mi["sim_threshold"].get<double>();
    c.mining.beta = mi["beta"].get<double>();
    c.mining.tau_init = mi["tau_init"].get<double>();
    c.mining.clamp_margin = mi["clamp_margin"].get<double>();
    c.mining.clamp_high = mi["clamp_high"].get<double>();
    c.mining.bins = c.bins;
    const auto& pr = m["prototypes"];
    c.prototypes.k = pr["k"].get<int>();
    c.prototypes.bg_iou = pr["bg_iou"].get<double>();
    c.prototypes.max_iter = pr["max_iter"].get<int>();
    c.prototypes.restarts = pr["restarts"].get<int>();
    c.prototypes.bins = c.bins;
    const auto& sk = m["sinkhorn"];
    c.sinkhorn.eps = sk["eps"].get<double>();
    c.sinkhorn.max_iter = sk["max_iter"].get<int>();
    c.sinkhorn.tol = sk["tol"].get<double>();
    const auto init = sk["init"].get<std::string>();
    if (init != "random" && init != "affinity") throw ValidationError("unknown sinkhorn init", {init});
    c.sinkhorn_init = init == "random" ? SinkhornInit::kRandom : SinkhornInit::kAffinity;
    const auto& co = m["contrastive"];
    c.contrastive.temperature = co["temperature"].get<double>();
    const auto mode = co["mode"].get<std::string>();
    if (mode != "cosine" && mode != "dot") throw ValidationError("unknown similarity mode", {mode});
    c.contrastive.mode = mode == "cosine" ? SimilarityMode::kCosine : SimilarityMode::kRawDot;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed trainer config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

TrainingData training_data(const World& world) {
  TrainingData d;
  d.num_classes = world.cfg.num_classes;
  for (const auto& im : world.images) {
    TrainSample s{im.id, &im.input, &im.vfm, &im.gt, &im.proposals};
    switch (im.split) {
      case Split::kLabeled: d.labeled.push_back(s); break;
      case Split::kUnlabeled: d.unlabeled.push_back(s); break;
      case Split::kEval: d.eval.push_back(s); break;
    }
  }
  return d;
}

std::vector<TrainSample> all_labeled(const World& world) {
  std::vector<TrainSample> out;
  for (const auto& im : world.images) out.push_back({im.id, &im.input, &im.vfm, &im.gt, &im.proposals});
  return out;
}

std::vector<int> proposal_targets(std::span<const Box> proposals, std::span<const Detection> gt,
                                  int num_classes, double iou_thr) {
  std::vector<int> out(proposals.size(), num_classes);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = iou_thr;
    for (const auto& g : gt) {
      const double v = iou(proposals[i], g.box);
      if (v >= best) {
        if (v > best || out[i] == num_classes) out[i] = g.class_id;
        best = v;
      }
    }
  }
  return out;
}

StudentModel StudentModel::init(int in_channels, int vfm_channels, int num_classes,
                                const TrainerConfig& cfg) {
  StudentModel m;
  Rng r0(cfg.seed, RngStream::kInit, 0), r1(cfg.seed, RngStream::kInit, 1);
  m.det = ToyDetector::init(in_channels, cfg.query_dim, num_classes, r0, cfg.relu);
  const int hidden = cfg.mlp_hidden > 0 ? cfg.mlp_hidden : cfg.query_dim;
  m.mlp = Mlp::init(vfm_channels, hidden, cfg.query_dim, r1);
  for (int l = 0; l < 2; ++l) {
    Rng rl(cfg.seed, RngStream::kInit, 2 + static_cast<std::uint64_t>(l));
    m.convs.push_back(ConvHead::init(cfg.query_dim, vfm_channels, rl));
  }
  return m;
}

std::vector<double> StudentModel::flatten() const {
  auto out = det.flatten();
  auto add = [&out](const auto& m) { out.insert(out.end(), m.data(), m.data() + m.size()); };
  add(mlp.w1); add(mlp.b1); add(mlp.w2); add(mlp.b2); add(mlp.w3); add(mlp.b3);
  for (const auto& c : convs) {
    add(c.weight);
    add(c.bias);
  }
  return out;
}

json checkpoint_to_json(const StudentModel& m, const ToyDetector& teacher) {
  json convs = json::array();
  for (const auto& c : m.convs) convs.push_back(conv_to_json(c));
  return json{{"schema_version", kSchemaVersion},
              {"student", detector_to_json(m.det)},
              {"teacher", detector_to_json(teacher)},
              {"mlp", mlp_to_json(m.mlp)},
              {"convs", convs}};
}

StudentModel checkpoint_from_json(const json& j, ToyDetector* teacher) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw ValidationError("unsupported checkpoint schema_version");
    StudentModel m;
    m.det = detector_from_json(j.at("student"));
    if (teacher) *teacher = detector_from_json(j.at("teacher"));
    m.mlp = mlp_from_json(j.at("mlp"));
    for (const auto& c : j.at("convs")) m.convs.push_back(conv_from_json(c));
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

json EvalResult::to_json() const {
  json ap = json::array();
  for (double v : per_class_ap) ap.push_back(nan_to_null(v));
  return json{{"map", map}, {"accuracy", accuracy}, {"per_class_ap", ap}, {"proposals", proposals}};
}

double average_precision(const std::vector<std::vector<Detection>>& preds,
                         const std::vector<std::vector<Detection>>& gt, int class_id,
                         double iou_thr) {
  if (preds.size() != gt.size()) throw DomainError("average_precision: image count mismatch");
  std::size_t n_gt = 0;
  for (const auto& g : gt)
    for (const auto& d : g) n_gt += d.class_id == class_id;
  if (n_gt == 0) return kNaN;

  struct Item {
    double score;
    std::size_t image;
    const Box* box;
  };
  std::vector<Item> items;
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (const auto& d : preds[i])
      if (d.class_id == class_id) items.push_back({d.score.value_or(0.0), i, &d.box});
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& a, const Item& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < items.size(); ++r) {
    const auto& g = gt[items[r].image];
    int best = -1;
    double best_iou = iou_thr;
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (used[items[r].image][k] || g[k].class_id != class_id) continue;
      const double v = iou(*items[r].box, g[k].box);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(k);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[items[r].image][static_cast<std::size_t>(best)] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
  }
  // Precision envelope, then area under the step curve.
  for (std::size_t r = precision.size(); r-- > 1;)
    precision[r - 1] = std::max(precision[r - 1], precision[r]);
  double ap = 0, prev_recall = 0;
  for (std::size_t r = 0; r < precision.size(); ++r) {
    ap += (recall[r] - prev_recall) * precision[r];
    prev_recall = recall[r];
  }
  return ap;
}

namespace {

// Max foreground probability and its class for every kept proposal.
std::vector<Detection> score_proposals(const DetectorForward& f, std::span<const Box> proposals,
                                       bool all_proposals) {
  std::vector<Detection> out;
  const auto n_out = static_cast<std::size_t>(f.logits.cols());
  for (std::size_t r = 0; r < f.kept.size(); ++r) {
    const std::span<const double> row(f.logits.row(static_cast<Eigen::Index>(r)).data(), n_out);
    const auto p = softmax(row);
    const auto fg = std::max_element(p.begin(), p.end() - 1);
    const int cls = static_cast<int>(fg - p.begin());
    if (!all_proposals && p.back() > *fg) continue;
    out.push_back({proposals[f.kept[r]], cls, *fg});
  }
  return out;
}

}  // namespace

std::vector<Detection> predict(const ToyDetector& det, const FeatureMap& input,
                               std::span<const Box> proposals, int bins, bool all_proposals) {
  const auto f = forward(det, input, proposals, bins);
  return score_proposals(f, proposals, all_proposals);
}

EvalResult evaluate(const ToyDetector& det, std::span<const TrainSample> eval, int bins) {
  if (eval.empty()) throw DomainError("evaluate: empty evaluation split");
  const int num_classes = det.num_classes();
  std::vector<std::vector<Detection>> preds, gts;
  std::size_t correct = 0, total = 0;
  for (const auto& s : eval) {
    const auto f = forward(det, *s.input, *s.proposals, bins);
    preds.push_back(score_proposals(f, *s.proposals, false));
    gts.push_back(*s.gt);
    const auto targets = proposal_targets(*s.proposals, *s.gt, num_classes);
    for (std::size_t r = 0; r < f.kept.size(); ++r) {
      Eigen::Index arg = 0;
      f.logits.row(static_cast<Eigen::Index>(r)).maxCoeff(&arg);
      correct += static_cast<int>(arg) == targets[f.kept[r]];
      ++total;
    }
  }
  EvalResult res;
  res.proposals = total;
  res.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  double sum = 0;
  int defined = 0;
  for (int c = 0; c < num_classes; ++c) {
    const double ap = average_precision(preds, gts, c);
    res.per_class_ap.push_back(ap);
    if (std::isfinite(ap)) {
      sum += ap;
      ++defined;
    }
  }
  res.map = defined ? sum / defined : 0.0;
  return res;
}

// ---------------------------------------------------------------------------

json RunRecord::to_json() const {
  json j{{"step", step},
         {"loss_sup", loss_sup},
         {"loss_unsup", loss_unsup},
         {"loss_con", loss_con},
         {"loss_sim", loss_sim},
         {"total", total},
         {"tau_high", tau_high},
         {"pl_precision", pl_precision},
         {"pl_recall", pl_recall},
         {"pl_count", pl_count},
         {"pl_direct", pl_direct},
         {"pl_mined", pl_mined}};
  if (eval) j["eval"] = eval->to_json();
  if (checkpoint_hash) j["checkpoint_hash"] = *checkpoint_hash;
  return j;
}

std::vector<json> RunLog::to_jsonl() const {
  std::vector<json> rows;
  rows.reserve(records.size());
  for (const auto& r : records) rows.push_back(r.to_json());
  return rows;
}

std::vector<std::pair<int, double>> RunLog::eval_trace() const {
  std::vector<std::pair<int, double>> out;
  for (const auto& r : records)
    if (r.eval) out.emplace_back(r.step, r.eval->map);
  return out;
}

json StabilityReport::to_json() const {
  return json{{"peak", peak},       {"peak_step", peak_step}, {"final", final_value},
              {"drop", drop},       {"collapse", collapse},   {"collapse_step", collapse_step}};
}

StabilityReport stability_report(const std::vector<std::pair<int, double>>& trace) {
  if (trace.size() < 2) throw DomainError("stability_report: need at least two eval points");
  StabilityReport r;
  std::size_t peak_at = 0;
  for (std::size_t i = 0; i < trace.size(); ++i)
    if (trace[i].second > trace[peak_at].second) peak_at = i;
  r.peak = trace[peak_at].second;
  r.peak_step = trace[peak_at].first;
  r.final_value = trace.back().second;
  r.drop = r.peak > 0 ? (r.peak - r.final_value) / r.peak : 0.0;
  r.collapse = r.peak - r.final_value > kCollapseDrop * r.peak;
  if (r.collapse)
    for (std::size_t i = peak_at + 1; i < trace.size(); ++i)
      if (trace[i].second < (1.0 - kCollapseDrop) * r.peak) {
        r.collapse_step = trace[i].first;
        break;
      }
  return r;
}

StabilityReport stability_report(const RunLog& log) { return stability_report(log.eval_trace()); }

// ---------------------------------------------------------------------------
// Shared step machinery. The standalone supervised trainer and Trainer::step
// go through the same helpers so a degenerate trainer config reproduces it
// bit for bit.

namespace {

struct View {
  const TrainSample* sample = nullptr;
  FeatureMap input;
  DetectorForward fwd;
  std::vector<int> targets;  // per kept proposal
  Matrix grad_logits;
};

std::vector<const TrainSample*> sample_batch(std::span<const TrainSample> pool, int n, Rng& rng) {
  std::vector<const TrainSample*> out;
  if (pool.empty()) return out;
  for (int i = 0; i < n; ++i) out.push_back(&pool[rng.below(pool.size())]);
  return out;
}

View make_view(const ToyDetector& det, const TrainSample& s, const AugmentConfig& aug, Rng& rng,
               int bins) {
  View v;
  v.sample = &s;
  v.input = strong_augment(*s.input, aug, rng);
  v.fwd = forward(det, v.input, *s.proposals, bins);
  return v;
}

void set_gt_targets(View& v, int num_classes) {
  const auto all = proposal_targets(*v.sample->proposals, *v.sample->gt, num_classes);
  v.targets.clear();
  for (auto k : v.fwd.kept) v.targets.push_back(all[k]);
}

// Mean over views of the per-view mean cross-entropy; fills grad_logits.
double classification_term(std::vector<View>& views, double weight) {
  double loss = 0;
  const double inv = 1.0 / static_cast<double>(views.size());
  for (auto& v : views) {
    const auto lv = detection_loss(v.fwd.logits, v.targets);
    loss += lv.value * inv;
    v.grad_logits = lv.grad * (weight * inv);
  }
  return loss;
}

void sgd(ToyDetector& p, const ToyDetector& g, double lr) {
  p.backbone_w -= lr * g.backbone_w;
  p.backbone_b -= lr * g.backbone_b;
  p.cls_w -= lr * g.cls_w;
  p.cls_b -= lr * g.cls_b;
}

void sgd(Mlp& p, const Mlp& g, double lr) {
  p.w1 -= lr * g.w1; p.b1 -= lr * g.b1;
  p.w2 -= lr * g.w2; p.b2 -= lr * g.b2;
  p.w3 -= lr * g.w3; p.b3 -= lr * g.b3;
}

void sgd(ConvHead& p, const ConvHead& g, double lr) {
  p.weight -= lr * g.weight;
  p.bias -= lr * g.bias;
}

PrototypeSet empty_prototypes(int num_classes, int channels, int k) {
  PrototypeSet p;
  p.channels = channels;
  p.components = k;
  p.num_classes = num_classes;
  for (int c = 0; c <= num_classes; ++c) {
    ClassPrototypes cp;
    cp.class_id = c;
    cp.present = false;
    cp.centroids = Matrix::Zero(k, channels);
    cp.counts.assign(static_cast<std::size_t>(k), 0);
    p.classes.push_back(std::move(cp));
  }
  return p;
}

}  // namespace

std::vector<double> train_supervised(ToyDetector& det, std::span<const TrainSample> labeled,
                                     const SupervisedConfig& cfg) {
  if (labeled.empty()) throw DomainError("train_supervised: no labeled images");
  std::vector<double> trace;
  for (int step = 1; step <= cfg.steps; ++step) {
    Rng batch_rng(cfg.seed, RngStream::kBatch, static_cast<std::uint64_t>(step));
    Rng aug_rng(cfg.seed, RngStream::kAugment, static_cast<std::uint64_t>(step));
    std::vector<View> views;
    for (const auto* s : sample_batch(labeled, cfg.batch_size, batch_rng)) {
      views.push_back(make_view(det, *s, cfg.augment, aug_rng, cfg.bins));
      set_gt_targets(views.back(), det.num_classes());
    }
    const double loss = classification_term(views, 1.0);
    if (!std::isfinite(loss)) throw NumericError("train_supervised: non-finite loss");
    ToyDetector grad = ToyDetector::zeros_like(det);
    for (const auto& v : views) backward(det, v.input, v.fwd, v.grad_logits, nullptr, nullptr, grad);
    sgd(det, grad, cfg.lr);
    trace.push_back(loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(StudentModel student, const TrainingData& data, const PrototypeSet* protos,
                 const TrainerConfig& cfg, const AugmentConfig& augment)
    : student_(std::move(student)),
      teacher_(student_.det),
      data_(data),
      protos_(protos),
      cfg_(cfg),
      augment_(augment) {
  cfg_.validate();
  if ((cfg_.mode == TrainMode::kVpm || cfg_.mode == TrainMode::kFullVg) && !protos_)
    throw DomainError("Trainer: this mode needs reference prototypes");
  if (student_.det.num_classes() != data_.num_classes)
    throw DomainError("Trainer: detector class count differs from the data");
  threshold_ = init_threshold_state(cfg_.mining);
  const std::size_t pool =
      !data_.unlabeled.empty() ? data_.unlabeled.size() : std::max<std::size_t>(1, data_.labeled.size());
  epoch_steps_ = static_cast<int>((pool + static_cast<std::size_t>(cfg_.batch_size) - 1) /
                                  static_cast<std::size_t>(cfg_.batch_size));
}

const RunRecord& Trainer::step() {
  ++step_;
  const int num_classes = data_.num_classes;
  const bool use_labeled = cfg_.mode != TrainMode::kSourceFree;
  const bool mining = cfg_.mode == TrainMode::kVpm || cfg_.mode == TrainMode::kFullVg;
  const bool full = cfg_.mode == TrainMode::kFullVg;
  const bool con = full && cfg_.lambda_con > 0;
  const bool sim = full && cfg_.lambda_sim > 0;

  RunRecord rec;
  rec.step = step_;
  Rng batch_rng(cfg_.seed, RngStream::kBatch, static_cast<std::uint64_t>(step_));
  Rng aug_rng(cfg_.seed, RngStream::kAugment, static_cast<std::uint64_t>(step_));

  std::vector<const TrainSample*> lab_batch, unl_batch;
  if (use_labeled) lab_batch = sample_batch(data_.labeled, cfg_.batch_size, batch_rng);
  unl_batch = sample_batch(data_.unlabeled, cfg_.batch_size, batch_rng);

  std::vector<View> lab_views, unl_views;
  for (const auto* s : lab_batch) {
    lab_views.push_back(make_view(student_.det, *s, augment_, aug_rng, cfg_.bins));
    set_gt_targets(lab_views.back(), num_classes);
  }
  if (!lab_views.empty()) rec.loss_sup = classification_term(lab_views, 1.0);

  // Pseudo-labels: teacher on the weak (identity) view, then the filter.
  if (!unl_batch.empty()) {
    const MiningConfig mcfg = mining ? cfg_.mining : fixed_threshold_config(cfg_.fixed_tau);
    const double tau = effective_tau_high(mcfg, threshold_);
    rec.tau_high = tau;
    PrototypeSet none;  // the plain filter never consults prototypes
    std::vector<double> scores;
    MatchCounts quality;
    for (const auto* s : unl_batch) {
      const auto tf = forward(teacher_, *s->input, *s->proposals, cfg_.bins);
      const auto preds = score_proposals(tf, *s->proposals, true);
      for (const auto& p : preds) scores.push_back(*p.score);
      const PrototypeSet* ps = protos_;
      if (!mining) {
        if (none.channels != s->vfm->channels)
          none = empty_prototypes(num_classes, s->vfm->channels, cfg_.prototypes.k);
        ps = &none;
      }
      const auto mined = mine(preds, *s->vfm, *ps, mcfg, tau);
      quality += match_detections(mined.accepted_detections(), *s->gt);
      for (const auto& a : mined.accepted) (a.tag == Provenance::kDirect ? rec.pl_direct : rec.pl_mined)++;

      View v = make_view(student_.det, *s, augment_, aug_rng, cfg_.bins);
      if (v.fwd.kept != tf.kept) throw NumericError("teacher and student proposal sets differ");
      v.targets.assign(v.fwd.kept.size(), num_classes);
      for (const auto& a : mined.accepted) v.targets[a.source_index] = a.det.class_id;
      teacher_labels_ += mined.accepted.size();
      unl_views.push_back(std::move(v));
    }
    const auto rep = summarize_matches(quality);
    rec.pl_precision = rep.precision;
    rec.pl_recall = rep.recall;
    rec.pl_count = quality.predictions;
    rec.loss_unsup = classification_term(unl_views, cfg_.unsup_weight);
    if (mcfg.mode == ThresholdMode::kDynamic)
      threshold_ = update_dynamic_threshold(threshold_, scores, mcfg);
  } else {
    rec.tau_high = effective_tau_high(mining ? cfg_.mining : fixed_threshold_config(cfg_.fixed_tau),
                                      threshold_);
  }

  std::vector<View*> views;
  for (auto& v : lab_views) views.push_back(&v);
  for (auto& v : unl_views) views.push_back(&v);
  std::vector<Matrix> grad_q(views.size());
  std::vector<std::vector<FeatureMap>> grad_lv(views.size());
  Mlp grad_mlp = Mlp::zeros_like(student_.mlp);
  std::vector<ConvHead> grad_convs;
  for (const auto& c : student_.convs) grad_convs.push_back(ConvHead::zeros_like(c));

  if (con && !views.empty()) {
    // Queries the student currently calls foreground, grouped by class.
    std::vector<std::pair<std::size_t, Eigen::Index>> rows;
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
      const auto& L = views[vi]->fwd.logits;
      for (Eigen::Index r = 0; r < L.rows(); ++r) {
        Eigen::Index arg = 0;
        L.row(r).maxCoeff(&arg);
        if (arg != num_classes) rows.emplace_back(vi, r);
      }
    }
    const int k = protos_->components;
    const auto dq = static_cast<Eigen::Index>(cfg_.query_dim);
    if (cfg_.sinkhorn_init == SinkhornInit::kAffinity && !running_init_) {
      running_means_ = Matrix::Zero(num_classes * k, dq);
      const Matrix r = student_.mlp.forward([&] {
        Matrix all(num_classes * k, protos_->channels);
        for (int c = 0; c < num_classes; ++c)
          all.middleRows(c * k, k) = protos_->classes[static_cast<std::size_t>(c)].centroids;
        return all;
      }());
      running_means_ = r;
      running_init_ = true;
    }
    Rng sk_rng(cfg_.seed, RngStream::kSinkhorn, static_cast<std::uint64_t>(step_));
    std::vector<ClassPrototypeBatch> batches(static_cast<std::size_t>(num_classes));
    std::vector<std::vector<std::pair<std::size_t, Eigen::Index>>> members(batches.size());
    std::vector<Matrix> assign(batches.size());
    for (const auto& [vi, r] : rows) {
      const auto& L = views[vi]->fwd.logits;
      Eigen::Index arg = 0;
      L.row(r).head(num_classes).maxCoeff(&arg);
      members[static_cast<std::size_t>(arg)].emplace_back(vi, r);
    }
    for (int c = 0; c < num_classes; ++c) {
      const auto& mem = members[static_cast<std::size_t>(c)];
      auto& b = batches[static_cast<std::size_t>(c)];
      if (mem.empty()) {
        b.prototypes = Matrix::Zero(k, dq);
        b.present.assign(static_cast<std::size_t>(k), false);
        b.mass = Vector::Zero(k);
        continue;
      }
      Matrix q(static_cast<Eigen::Index>(mem.size()), dq);
      for (std::size_t m = 0; m < mem.size(); ++m)
        q.row(static_cast<Eigen::Index>(m)) = views[mem[m].first]->fwd.queries.row(mem[m].second);
      Matrix init;
      if (cfg_.sinkhorn_init == SinkhornInit::kRandom) {
        init = sinkhorn_random_init(q.rows(), k, sk_rng);
      } else {
        init = Matrix(q.rows(), k);
        for (Eigen::Index i = 0; i < q.rows(); ++i)
          for (int n = 0; n < k; ++n) {
            const auto mu = running_means_.row(c * k + n);
            const double den = q.row(i).norm() * mu.norm();
            init(i, n) = den > 1e-12 ? q.row(i).dot(mu) / den : 0.0;
          }
      }
      assign[static_cast<std::size_t>(c)] = sinkhorn_assign(init, cfg_.sinkhorn).a;
      b = aggregate_prototypes(q, assign[static_cast<std::size_t>(c)]);
      if (cfg_.sinkhorn_init == SinkhornInit::kAffinity)
        for (int n = 0; n < k; ++n)
          if (b.present[static_cast<std::size_t>(n)])
            running_means_.row(c * k + n) = 0.9 * running_means_.row(c * k + n) + 0.1 * b.prototypes.row(n);
    }
    const auto cr = contrastive_loss(batches, *protos_, student_.mlp, cfg_.contrastive);
    rec.loss_con = cr.loss;
    if (cr.terms > 0) {
      sgd(grad_mlp, cr.grad_mlp, -cfg_.lambda_con);  // adds lambda * g
      for (int c = 0; c < num_classes; ++c) {
        const auto& mem = members[static_cast<std::size_t>(c)];
        if (mem.empty()) continue;
        const Matrix gq = aggregate_prototypes_backward(cr.grad_prototypes[static_cast<std::size_t>(c)],
                                                        assign[static_cast<std::size_t>(c)],
                                                        batches[static_cast<std::size_t>(c)]);
        for (std::size_t m = 0; m < mem.size(); ++m) {
          auto& g = grad_q[mem[m].first];
          if (g.size() == 0) g = Matrix::Zero(views[mem[m].first]->fwd.queries.rows(), dq);
          g.row(mem[m].second) += cfg_.lambda_con * gq.row(static_cast<Eigen::Index>(m));
        }
      }
    }
  }

  if (sim && !views.empty()) {
    const double inv = 1.0 / static_cast<double>(views.size());
    for (std::size_t vi = 0; vi < views.size(); ++vi) {
      const auto r = image_alignment_loss(views[vi]->fwd.levels, *views[vi]->sample->vfm, student_.convs);
      rec.loss_sim += r.loss * inv;
      grad_lv[vi] = r.grad_student;
      for (auto& g : grad_lv[vi]) g.as_matrix() *= cfg_.lambda_sim * inv;
      for (std::size_t l = 0; l < grad_convs.size(); ++l)
        sgd(grad_convs[l], r.grad_convs[l], -cfg_.lambda_sim * inv);
    }
  }

  rec.total = rec.loss_sup + cfg_.unsup_weight * rec.loss_unsup + cfg_.lambda_con * rec.loss_con +
              cfg_.lambda_sim * rec.loss_sim;
  if (!std::isfinite(rec.total)) {
    json dump{{"step", step_},
              {"mode", to_string(cfg_.mode)},
              {"losses", {{"sup", rec.loss_sup}, {"unsup", rec.loss_unsup},
                          {"con", rec.loss_con}, {"sim", rec.loss_sim}}},
              {"tau_high", rec.tau_high}};
    json ids = json::array();
    for (const auto* v : views) ids.push_back(v->sample->id);
    dump["batch"] = ids;
    if (!cfg_.dump_dir.empty()) {
      std::filesystem::create_directories(cfg_.dump_dir);
      write_json(cfg_.dump_dir / ("nan_step_" + std::to_string(step_) + ".json"), dump);
    }
    throw NumericError("non-finite loss at step " + std::to_string(step_) + ": " + dump.dump());
  }

  ToyDetector grad = ToyDetector::zeros_like(student_.det);
  for (std::size_t vi = 0; vi < views.size(); ++vi) {
    const auto& v = *views[vi];
    backward(student_.det, v.input, v.fwd, v.grad_logits, grad_q[vi].size() ? &grad_q[vi] : nullptr,
             grad_lv[vi].empty() ? nullptr : &grad_lv[vi], grad);
  }
  sgd(student_.det, grad, cfg_.lr);
  const double head_lr = cfg_.lr * cfg_.head_lr_scale;
  if (con && head_lr > 0) sgd(student_.mlp, grad_mlp, head_lr);
  if (sim && head_lr > 0)
    for (std::size_t l = 0; l < student_.convs.size(); ++l) sgd(student_.convs[l], grad_convs[l], head_lr);
  ema_update(teacher_, student_.det, cfg_.alpha);

  if (step_ % cfg_.eval_every == 0 || step_ == cfg_.steps) {
    if (!data_.eval.empty()) rec.eval = evaluate(teacher_, data_.eval, cfg_.bins);
  }
  if (step_ % epoch_steps_ == 0) rec.checkpoint_hash = parameter_hash(student_.flatten());
  log_.records.push_back(std::move(rec));
  return log_.records.back();
}

void Trainer::run(const std::function<void(const RunRecord&)>& on_record) {
  if (step_ == 0 && log_.records.empty() && !data_.eval.empty()) {
    RunRecord r0;
    r0.step = 0;
    r0.tau_high = effective_tau_high(
        cfg_.mode == TrainMode::kVpm || cfg_.mode == TrainMode::kFullVg ? cfg_.mining
                                                                       : fixed_threshold_config(cfg_.fixed_tau),
        threshold_);
    r0.eval = evaluate(teacher_, data_.eval, cfg_.bins);
    log_.records.push_back(r0);
    if (on_record) on_record(log_.records.back());
  }
  while (step_ < cfg_.steps) {
    const auto& r = step();
    if (on_record) on_record(r);
  }
}

// ---------------------------------------------------------------------------

std::vector<double> fit_alignment_heads(StudentModel& m, std::span<const TrainSample> samples,
                                        const SupervisedConfig& cfg) {
  if (samples.empty()) throw DomainError("fit_alignment_heads: no images");
  std::vector<double> trace;
  for (int step = 1; step <= cfg.steps; ++step) {
    Rng batch_rng(cfg.seed, RngStream::kBatch, static_cast<std::uint64_t>(step));
    std::vector<ConvHead> grad;
    for (const auto& c : m.convs) grad.push_back(ConvHead::zeros_like(c));
    const auto batch = sample_batch(samples, cfg.batch_size, batch_rng);
    const double inv = 1.0 / static_cast<double>(batch.size());
    double loss = 0;
    for (const auto* s : batch) {
      const auto f = forward(m.det, *s->input, *s->proposals, cfg.bins);
      const auto r = image_alignment_loss(f.levels, *s->vfm, m.convs);
      loss += r.loss * inv;
      for (std::size_t l = 0; l < grad.size(); ++l) sgd(grad[l], r.grad_convs[l], -inv);
    }
    if (!std::isfinite(loss)) throw NumericError("fit_alignment_heads: non-finite loss");
    for (std::size_t l = 0; l < grad.size(); ++l) sgd(m.convs[l], grad[l], cfg.lr);
    trace.push_back(loss);
  }
  return trace;
}

StudentModel source_model(const WorldConfig& world_cfg, const TrainerConfig& cfg) {
  const World source = generate_world(world_cfg, WorldRole::kSource, cfg.workers);
  StudentModel m = StudentModel::init(world_cfg.base_channels, world_cfg.vfm_channels,
                                      world_cfg.num_classes, cfg);
  const auto labeled = all_labeled(source);
  SupervisedConfig sc;
  sc.lr = cfg.source_lr;
  sc.steps = cfg.source_steps;
  sc.batch_size = cfg.batch_size;
  sc.seed = cfg.seed ^ 0x5eed5eedULL;
  sc.bins = cfg.bins;
  sc.augment = world_cfg.augment;
  if (sc.steps > 0) train_supervised(m.det, labeled, sc);
  sc.steps = cfg.head_steps;
  if (sc.steps > 0) fit_alignment_heads(m, labeled, sc);
  return m;
}

namespace {

PrototypeSet target_prototypes(const World& world, const TrainerConfig& cfg) {
  std::vector<LabeledImage> li;
  for (const auto* im : world.split(Split::kLabeled))
    li.push_back({&im->vfm, &im->gt, static_cast<double>(world.cfg.width_px()),
                  static_cast<double>(world.cfg.height_px())});
  ExtractOptions opts = cfg.prototypes;
  opts.seed = cfg.seed;
  opts.bins = cfg.bins;
  return extract_prototypes(li, world.cfg.num_classes, opts);
}

}  // namespace

SimulationResult simulate(const World& world, const StudentModel& source, const TrainerConfig& cfg,
                          const std::function<void(const RunRecord&)>& on_record) {
  cfg.validate();
  const TrainingData data = training_data(world);
  StudentModel student = source;
  std::optional<PrototypeSet> protos;
  if (cfg.mode == TrainMode::kVpm || cfg.mode == TrainMode::kFullVg) protos = target_prototypes(world, cfg);
  Trainer t(std::move(student), data, protos ? &*protos : nullptr, cfg, world.cfg.augment);
  t.run(on_record);
  SimulationResult res;
  res.log = t.log();
  res.student = t.student();
  res.teacher = t.teacher();
  const auto trace = res.log.eval_trace();
  if (trace.size() >= 2) res.stability = stability_report(trace);
  for (const auto& r : res.log.records)
    if (r.eval) {
      if (r.step == 0) res.initial_eval = *r.eval;
      res.final_eval = *r.eval;
    }
  return res;
}

SimulationResult simulate(const WorldConfig& world_cfg, const TrainerConfig& cfg,
                          const std::function<void(const RunRecord&)>& on_record) {
  world_cfg.validate();
  cfg.validate();
  const World world = generate_world(world_cfg, WorldRole::kTarget, cfg.workers);
  const StudentModel source = source_model(world_cfg, cfg);
  return simulate(world, source, cfg, on_record);
}

std::vector<MiningBenchmarkRow> mining_benchmark(const World& world, const ToyDetector& source,
                                                 const TrainerConfig& cfg,
                                                 std::span<const double> tau_lows) {
  const PrototypeSet protos = target_prototypes(world, cfg);
  DetectionsById preds, gt;
  std::map<std::string, const FeatureMap*> vfm;
  for (const auto* im : world.split(Split::kUnlabeled)) {
    preds[im->id] = predict(source, im->input, im->proposals, cfg.bins, true);
    gt[im->id] = im->gt;
    vfm[im->id] = &im->vfm;
  }
  auto loader = [&vfm](const std::string& id) { return *vfm.at(id); };
  std::vector<MiningBenchmarkRow> rows;
  for (double tl : tau_lows) {
    MiningBenchmarkRow row;
    row.tau_low = tl;
    MiningConfig mc = cfg.mining;
    mc.tau_low = tl;
    mc.bins = cfg.bins;
    const auto mined = mine_dataset(preds, loader, protos, mc, init_threshold_state(mc), cfg.batch_size);
    row.mined = mining_report(mined.per_image, gt);
    const MiningConfig fc = fixed_threshold_config(tl);
    const auto base = mine_dataset(preds, loader, protos, fc, init_threshold_state(fc), cfg.batch_size);
    row.baseline = mining_report(base.per_image, gt);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace vgsfod
