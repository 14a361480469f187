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

#include "vgsfod/mining.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vgsfod/errors.hpp"

namespace vgsfod {

using nlohmann::json;

void MiningConfig::validate() const {
  std::vector<std::string> bad;
  if (!(tau_low >= 0 && tau_low <= 1)) bad.emplace_back("tau_low");
  if (!(clamp_high <= 1 && tau_low < clamp_high)) bad.emplace_back("clamp_high");
  if (!(clamp_margin >= 0 && clamp_low() <= clamp_high)) bad.emplace_back("clamp_margin");
  if (mode == ThresholdMode::kFixed && !(tau_high_fixed >= tau_low && tau_high_fixed <= 1))
    bad.emplace_back("tau_high");
  if (!(sim_threshold > -1) || !std::isfinite(sim_threshold)) bad.emplace_back("sim_threshold");
  if (!(beta >= 0 && beta <= 1)) bad.emplace_back("beta");
  if (bins < 1) bad.emplace_back("bins");
  if (!bad.empty()) throw ValidationError("invalid mining config", bad);
}

MiningConfig fixed_threshold_config(double tau) {
  MiningConfig c;
  c.mode = ThresholdMode::kFixed;
  c.tau_low = tau;
  c.tau_high_fixed = tau;
  c.sim_threshold = 2.0;
  c.clamp_margin = 0;
  c.clamp_high = std::max(tau, 1.0);
  return c;
}

DynamicThresholdState init_threshold_state(const MiningConfig& cfg) {
  const double t = std::clamp(cfg.tau_init, cfg.clamp_low(), cfg.clamp_high);
  return {t, t, 0};
}

DynamicThresholdState update_dynamic_threshold(const DynamicThresholdState& state,
                                               std::span<const double> scores,
                                               const MiningConfig& cfg) {
  double sum = 0;
  std::size_t n = 0;
  for (double s : scores)
    if (s > cfg.tau_low) {
      sum += s;
      ++n;
    }
  if (n == 0) return state;
  DynamicThresholdState next = state;
  next.accumulator = cfg.beta * state.tau_high + (1 - cfg.beta) * (sum / static_cast<double>(n));
  next.tau_high = std::clamp(next.accumulator, cfg.clamp_low(), cfg.clamp_high);
  ++next.updates;
  return next;
}

double effective_tau_high(const MiningConfig& cfg, const DynamicThresholdState& s) {
  return cfg.mode == ThresholdMode::kFixed ? cfg.tau_high_fixed : s.tau_high;
}

const char* to_string(Provenance p) { return p == Provenance::kDirect ? "direct" : "mined"; }

const char* to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kBelowLow: return "below_low";
    case RejectReason::kSimFail: return "sim_fail";
    case RejectReason::kClassMismatch: return "class_mismatch";
    case RejectReason::kBgMatch: return "bg_match";
  }
  return "?";
}

RejectionCounts& RejectionCounts::operator+=(const RejectionCounts& o) {
  below_low += o.below_low;
  sim_fail += o.sim_fail;
  class_mismatch += o.class_mismatch;
  bg_match += o.bg_match;
  absent_prototypes += o.absent_prototypes;
  return *this;
}

std::vector<Detection> MinedLabelSet::accepted_detections() const {
  std::vector<Detection> out;
  out.reserve(accepted.size());
  for (const auto& a : accepted) out.push_back(a.det);
  return out;
}

PrototypeMatch best_prototype(std::span<const double> f, const PrototypeSet& protos) {
  PrototypeMatch best;
  for (const auto& cp : protos.classes) {
    if (!cp.present) continue;
    for (Eigen::Index k = 0; k < cp.centroids.rows(); ++k) {
      const std::span<const double> c(cp.centroids.row(k).data(),
                                      static_cast<std::size_t>(cp.centroids.cols()));
      double s = -1;
      try {
        s = cosine_similarity(f, c);
      } catch (const DegenerateError&) {
      }
      if (best.class_id < 0 || s > best.similarity) {
        best = {cp.class_id, static_cast<int>(k), s};
      }
    }
  }
  return best;
}

MinedLabelSet mine(std::span<const Detection> predictions, const FeatureMap& vfm_map,
                   const PrototypeSet& protos, const MiningConfig& cfg, double tau_high) {
  if (protos.channels != vfm_map.channels)
    throw DomainError("mine: prototype and VFM channel counts differ");
  MinedLabelSet out;
  auto reject = [&out](std::size_t i, RejectReason r, bool absent = false) {
    out.rejected.push_back({i, r, absent});
    switch (r) {
      case RejectReason::kBelowLow: ++out.counts.below_low; break;
      case RejectReason::kSimFail: ++out.counts.sim_fail; break;
      case RejectReason::kClassMismatch: ++out.counts.class_mismatch; break;
      case RejectReason::kBgMatch: ++out.counts.bg_match; break;
    }
    if (absent) ++out.counts.absent_prototypes;
  };

  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Detection& p = predictions[i];
    if (!p.score) throw DomainError("mine: prediction without a score");
    const double s = *p.score;
    if (s >= tau_high) {
      out.accepted.push_back({p, Provenance::kDirect, i, 0.0, -1});
      continue;
    }
    if (s < cfg.tau_low) {
      reject(i, RejectReason::kBelowLow);
      continue;
    }
    if (p.class_id < 0 || p.class_id >= protos.num_classes ||
        !protos.classes[static_cast<std::size_t>(p.class_id)].present) {
      reject(i, RejectReason::kSimFail, true);
      continue;
    }
    std::vector<double> f;
    try {
      f = roi_align(vfm_map, p.box, cfg.bins);
    } catch (const DegenerateError&) {
      ++out.degenerate;
      reject(i, RejectReason::kSimFail);
      continue;
    } catch (const DomainError&) {
      ++out.degenerate;
      reject(i, RejectReason::kSimFail);
      continue;
    }
    ++out.similarity_queries;
    const PrototypeMatch m = best_prototype(f, protos);
    if (m.similarity < cfg.sim_threshold) {
      reject(i, RejectReason::kSimFail);
    } else if (m.class_id == protos.background_id()) {
      reject(i, RejectReason::kBgMatch);
    } else if (m.class_id != p.class_id) {
      reject(i, RejectReason::kClassMismatch);
    } else {
      out.accepted.push_back({p, Provenance::kMined, i, m.similarity, m.class_id});
    }
  }
  return out;
}

Matrix similarity_map(const FeatureMap& vfm_map, const Box& reference, int bins) {
  const auto ref = roi_align(vfm_map, reference, bins);
  Matrix out(vfm_map.height, vfm_map.width);
  for (int h = 0; h < vfm_map.height; ++h)
    for (int w = 0; w < vfm_map.width; ++w) {
      double s = -1;
      try {
        s = cosine_similarity(ref, vfm_map.cell(h, w));
      } catch (const DegenerateError&) {
      }
      out(h, w) = s;
    }
  return out;
}

MatchCounts& MatchCounts::operator+=(const MatchCounts& o) {
  true_positives += o.true_positives;
  predictions += o.predictions;
  ground_truth += o.ground_truth;
  return *this;
}

MatchCounts match_detections(std::span<const Detection> preds,
                             std::span<const Detection> gt, double iou_thr) {
  std::vector<std::size_t> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return preds[a].score.value_or(1.0) > preds[b].score.value_or(1.0);
  });
  std::vector<bool> used(gt.size(), false);
  MatchCounts m{0, preds.size(), gt.size()};
  for (std::size_t i : order) {
    double best = iou_thr;
    std::size_t best_g = gt.size();
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (used[g] || gt[g].class_id != preds[i].class_id) continue;
      const double v = iou(preds[i].box, gt[g].box);
      if (v >= best && (best_g == gt.size() || v > best)) {
        best = v;
        best_g = g;
      }
    }
    if (best_g < gt.size()) {
      used[best_g] = true;
      ++m.true_positives;
    }
  }
  return m;
}

MiningReport summarize_matches(const MatchCounts& m) {
  MiningReport r;
  r.matches = m;
  r.precision = m.predictions ? static_cast<double>(m.true_positives) / m.predictions : 1.0;
  r.recall = m.ground_truth ? static_cast<double>(m.true_positives) / m.ground_truth : 0.0;
  r.f1 = (r.precision + r.recall) > 0 ? 2 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  if (m.true_positives == 0) r.f1 = 0.0;
  return r;
}

MiningReport mining_report(const std::map<std::string, MinedLabelSet>& mined,
                           const DetectionsById& gt, double iou_thr) {
  MatchCounts total;
  RejectionCounts rej;
  std::size_t direct = 0, mined_n = 0, queries = 0;
  static const std::vector<Detection> kNone;
  for (const auto& [id, set] : mined) {
    const auto it = gt.find(id);
    const auto dets = set.accepted_detections();
    total += match_detections(dets, it == gt.end() ? kNone : it->second, iou_thr);
    rej += set.counts;
    queries += set.similarity_queries;
    for (const auto& a : set.accepted) (a.tag == Provenance::kDirect ? direct : mined_n)++;
  }
  MiningReport r = summarize_matches(total);
  r.rejections = rej;
  r.direct = direct;
  r.mined = mined_n;
  r.similarity_queries = queries;
  return r;
}

json MiningReport::to_json() const {
  return json{{"precision", precision},
              {"recall", recall},
              {"f1", f1},
              {"true_positives", matches.true_positives},
              {"accepted", matches.predictions},
              {"ground_truth", matches.ground_truth},
              {"direct", direct},
              {"mined", mined},
              {"similarity_queries", similarity_queries},
              {"rejections",
               {{"below_low", rejections.below_low},
                {"sim_fail", rejections.sim_fail},
                {"class_mismatch", rejections.class_mismatch},
                {"bg_match", rejections.bg_match},
                {"absent_prototypes", rejections.absent_prototypes}}}};
}

DatasetMiningResult mine_dataset(
    const DetectionsById& predictions,
    const std::function<FeatureMap(const std::string&)>& load_vfm,
    const PrototypeSet& protos, const MiningConfig& cfg, DynamicThresholdState state,
    std::size_t batch_size) {
  cfg.validate();
  batch_size = std::max<std::size_t>(1, batch_size);
  DatasetMiningResult res;
  std::vector<std::string> ids;
  for (const auto& [id, _] : predictions) ids.push_back(id);
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    const double tau_high = effective_tau_high(cfg, state);
    res.tau_trace.push_back(tau_high);
    std::vector<double> scores;
    for (std::size_t i = start; i < std::min(ids.size(), start + batch_size); ++i) {
      const auto& preds = predictions.at(ids[i]);
      const FeatureMap vfm = load_vfm(ids[i]);
      res.per_image[ids[i]] = mine(preds, vfm, protos, cfg, tau_high);
      for (const auto& p : preds) scores.push_back(p.score.value_or(0.0));
    }
    if (cfg.mode == ThresholdMode::kDynamic)
      state = update_dynamic_threshold(state, scores, cfg);
  }
  res.final_state = state;
  return res;
}

json mined_to_json(const std::map<std::string, MinedLabelSet>& mined) {
  json images = json::object();
  for (const auto& [id, set] : mined) {
    json acc = json::array();
    for (const auto& a : set.accepted) {
      json d = detection_to_json(a.det);
      d["tag"] = to_string(a.tag);
      d["source_index"] = a.source_index;
      if (a.tag == Provenance::kMined) d["similarity"] = a.similarity;
      acc.push_back(std::move(d));
    }
    json rej = json::array();
    for (const auto& r : set.rejected)
      rej.push_back({{"source_index", r.source_index}, {"reason", to_string(r.reason)}});
    images[id] = {{"accepted", std::move(acc)}, {"rejected", std::move(rej)}};
  }
  return json{{"schema_version", kSchemaVersion}, {"images", std::move(images)}};
}

}  // namespace vgsfod
