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


#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "vgsfod/errors.hpp"
#include "vgsfod/trainer.hpp"

using namespace vgsfod;

namespace {

struct Fixture {
  World world;
  TrainingData data;
  PrototypeSet protos;

  Fixture() : world(generate_world(config())), data(training_data(world)) {
    std::vector<LabeledImage> li;
    for (const auto* im : world.split(Split::kLabeled))
      li.push_back({&im->vfm, &im->gt, static_cast<double>(world.cfg.width_px()), static_cast<double>(world.cfg.height_px())});
    protos = extract_prototypes(li, world.cfg.num_classes, ExtractOptions{});
  }

  static WorldConfig config() {
    WorldConfig c;
    c.num_images = 40;
    c.num_eval_images = 10;
    c.labeled_fraction = 0.2;
    return c;
  }

  StudentModel student(const TrainerConfig& t) const {
    return StudentModel::init(world.cfg.base_channels, world.cfg.vfm_channels, world.cfg.num_classes, t);
  }

  // Supervised warm start so teacher scores clear tau_low.
  StudentModel warm(const TrainerConfig& t) const {
    StudentModel s = student(t);
    SupervisedConfig sc;
    sc.steps = 100;
    sc.lr = 0.1;
    train_supervised(s.det, data.labeled, sc);
    return s;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

TrainerConfig small(TrainMode mode) {
  TrainerConfig t;
  t.mode = mode;
  t.steps = 12;
  t.eval_every = 6;
  return t;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("labeled-only objective reproduces supervised training bit for bit") {
    const auto& f = fixture();
    TrainerConfig t = small(TrainMode::kMtSemi);
    t.unsup_weight = 0;
    const StudentModel s0 = f.student(t);
    Trainer tr(s0, f.data, nullptr, t, f.world.cfg.augment);
    tr.run();
    ToyDetector ref = s0.det;
    SupervisedConfig sc;
    sc.lr = t.lr;
    sc.steps = t.steps;
    sc.batch_size = t.batch_size;
    sc.seed = t.seed;
    sc.bins = t.bins;
    sc.augment = f.world.cfg.augment;
    train_supervised(ref, f.data.labeled, sc);
    CHECK(tr.student().det.flatten() == ref.flatten());
  }

  TEST_CASE("zero learning rate is a fixed point") {
    const auto& f = fixture();
    TrainerConfig t = small(TrainMode::kFullVg);
    t.lr = 0;
    t.head_lr_scale = 1.0;
    const StudentModel s0 = f.student(t);
    Trainer tr(s0, f.data, &f.protos, t, f.world.cfg.augment);
    tr.run();
    CHECK(tr.student().flatten() == s0.flatten());
    const auto a = tr.teacher().flatten(), b = s0.det.flatten();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= 1e-15 * std::max(1.0, std::abs(b[i])));
  }

  TEST_CASE("total loss is the weighted sum of its terms") {
    const auto& f = fixture();
    TrainerConfig t = small(TrainMode::kFullVg);
    t.unsup_weight = 0.5;
    t.lambda_con = 0.3;
    t.lambda_sim = 2.0;
    Trainer tr(f.student(t), f.data, &f.protos, t, f.world.cfg.augment);
    tr.run();
    bool con = false, sim = false;
    for (const auto& r : tr.log().records) {
      if (r.step == 0) continue;
      CHECK(r.total == r.loss_sup + 0.5 * r.loss_unsup + 0.3 * r.loss_con + 2.0 * r.loss_sim);
      con = con || r.loss_con > 0;
      sim = sim || r.loss_sim > 0;
      CHECK(r.loss_sim >= 0.0);
      CHECK(r.loss_sim <= 2.0);
    }
    CHECK(con);
    CHECK(sim);
  }

  TEST_CASE("mode gating") {
    const auto& f = fixture();
    for (TrainMode m : {TrainMode::kSourceFree, TrainMode::kMtSemi, TrainMode::kVpm, TrainMode::kFullVg}) {
      const TrainerConfig t = small(m);
      Trainer tr(f.student(t), f.data, &f.protos, t, f.world.cfg.augment);
      tr.run();
      std::size_t mined = 0;
      for (const auto& r : tr.log().records) {
        if (r.step == 0) continue;
        if (m == TrainMode::kSourceFree) CHECK(r.loss_sup == 0.0);
        else CHECK(r.loss_sup > 0.0);
        if (m != TrainMode::kFullVg) {
          CHECK(r.loss_con == 0.0);
          CHECK(r.loss_sim == 0.0);
        }
        if (m == TrainMode::kSourceFree || m == TrainMode::kMtSemi) CHECK(r.tau_high == t.fixed_tau);
        mined += r.pl_mined;
      }
      if (m == TrainMode::kSourceFree || m == TrainMode::kMtSemi) CHECK(mined == 0);
    }
  }

  TEST_CASE("pseudo-labels all come from the teacher") {
    const auto& f = fixture();
    const TrainerConfig t = small(TrainMode::kVpm);
    Trainer tr(f.warm(t), f.data, &f.protos, t, f.world.cfg.augment);
    tr.run();
    std::size_t sum = 0;
    for (const auto& r : tr.log().records) sum += r.pl_direct + r.pl_mined;
    CHECK(tr.teacher_pseudo_labels() == sum);
    CHECK(sum > 0);
  }

  TEST_CASE("dynamic threshold moves and stays clamped in the mining modes") {
    const auto& f = fixture();
    const TrainerConfig t = small(TrainMode::kVpm);
    Trainer tr(f.warm(t), f.data, &f.protos, t, f.world.cfg.augment);
    tr.run();
    CHECK(tr.threshold().updates > 0);
    for (const auto& r : tr.log().records) {
      CHECK(r.tau_high >= t.mining.clamp_low() - 1e-15);
      CHECK(r.tau_high <= t.mining.clamp_high);
    }
  }

  TEST_CASE("log layout: step-0 eval, periodic evals, epoch checkpoints") {
    const auto& f = fixture();
    const TrainerConfig t = small(TrainMode::kMtSemi);
    Trainer tr(f.student(t), f.data, nullptr, t, f.world.cfg.augment);
    tr.run();
    const auto& recs = tr.log().records;
    REQUIRE(recs.size() == 13);
    CHECK(recs[0].step == 0);
    const auto trace = tr.log().eval_trace();
    REQUIRE(trace.size() == 3);
    CHECK(trace[1].first == 6);
    CHECK(trace[2].first == 12);
    // 32 unlabeled images in batches of 4.
    CHECK(recs[8].checkpoint_hash.has_value());
    CHECK(!recs[7].checkpoint_hash.has_value());
    CHECK(tr.log().to_jsonl().size() == 13);
  }

  TEST_CASE("identical configs give identical runs") {
    const auto& f = fixture();
    const TrainerConfig t = small(TrainMode::kFullVg);
    Trainer a(f.student(t), f.data, &f.protos, t, f.world.cfg.augment);
    Trainer b(f.student(t), f.data, &f.protos, t, f.world.cfg.augment);
    a.run();
    b.run();
    CHECK(a.student().flatten() == b.student().flatten());
    for (std::size_t i = 0; i < a.log().records.size(); ++i)
      CHECK(a.log().records[i].to_json() == b.log().records[i].to_json());
  }

  TEST_CASE("non-finite loss aborts with a dump") {
    const auto& f = fixture();
    TrainerConfig t = small(TrainMode::kMtSemi);
    t.dump_dir = vgsfod::testing::scratch_dir("nan");
    StudentModel s = f.student(t);
    s.det.cls_b[0] = std::nan("");
    Trainer tr(s, f.data, nullptr, t, f.world.cfg.augment);
    CHECK_THROWS_AS(tr.step(), NumericError);
    const auto dump = read_json(t.dump_dir / "nan_step_1.json");
    CHECK(dump.at("step") == 1);
    CHECK(dump.at("mode") == "mt_semi");
    CHECK(dump.at("batch").size() == 8);
  }

  TEST_CASE("construction errors") {
    const auto& f = fixture();
    const TrainerConfig t = small(TrainMode::kVpm);
    CHECK_THROWS_AS(Trainer(f.student(t), f.data, nullptr, t, f.world.cfg.augment), DomainError);
    TrainerConfig bad = t;
    bad.alpha = 1.0;
    CHECK_THROWS_AS(Trainer(f.student(t), f.data, &f.protos, bad, f.world.cfg.augment), ValidationError);
    StudentModel wrong = StudentModel::init(f.world.cfg.base_channels, f.world.cfg.vfm_channels, 2, t);
    CHECK_THROWS_AS(Trainer(wrong, f.data, &f.protos, t, f.world.cfg.augment), DomainError);
  }
}

TEST_SUITE("trainer config") {
  TEST_CASE("json round trip and unknown keys") {
    TrainerConfig t;
    t.mode = TrainMode::kVpm;
    t.lr = 0.02;
    t.mining.beta = 0.9;
    t.sinkhorn.eps = 0.1;
    const auto j = trainer_config_to_json(t);
    CHECK(trainer_config_to_json(trainer_config_from_json(j)) == j);
    auto k = j;
    k["lrr"] = 1;
    k["mining"]["betta"] = 1;
    try {
      trainer_config_from_json(k);
      FAIL("expected a ValidationError");
    } catch (const ValidationError& e) {
      CHECK(e.offending() == std::vector<std::string>{"lrr", "mining.betta"});
    }
  }

  TEST_CASE("validation names every offending field") {
    TrainerConfig t;
    t.batch_size = 0;
    t.sinkhorn.eps = -1;
    try {
      t.validate();
      FAIL("expected a ValidationError");
    } catch (const ValidationError& e) {
      CHECK(e.offending() == std::vector<std::string>{"batch_size", "sinkhorn.eps"});
    }
  }

  TEST_CASE("mode names") {
    for (TrainMode m : {TrainMode::kSourceFree, TrainMode::kMtSemi, TrainMode::kVpm, TrainMode::kFullVg})
      CHECK(train_mode_from_string(to_string(m)) == m);
    CHECK_THROWS(train_mode_from_string("adam"));
  }

  TEST_CASE("checkpoint round trip keeps student and teacher") {
    const auto& f = fixture();
    const TrainerConfig t;
    const StudentModel s = f.student(t);
    Rng rng(1, RngStream::kTest);
    const ToyDetector teacher = ToyDetector::init(f.world.cfg.base_channels, t.query_dim, 3, rng);
    ToyDetector back_t;
    const StudentModel back = checkpoint_from_json(nlohmann::json::parse(checkpoint_to_json(s, teacher).dump()), &back_t);
    CHECK(back.flatten() == s.flatten());
    CHECK(back_t.flatten() == teacher.flatten());
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("hand-computed average precision") {
    const std::vector<std::vector<Detection>> gt{{{{0, 0, 10, 10}, 0, {}}, {{20, 0, 30, 10}, 0, {}}}};
    const std::vector<std::vector<Detection>> p{{{{0, 0, 10, 10}, 0, 0.9}, {{50, 50, 60, 60}, 0, 0.8}, {{20, 0, 30, 10}, 0, 0.7}}};
    CHECK(average_precision(p, gt, 0) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-15));
    CHECK(std::isnan(average_precision(p, gt, 1)));
    CHECK(average_precision({{}}, gt, 0) == 0.0);
  }

  TEST_CASE("greedy AP equals the exhaustive-matching AP on disjoint GT") {
    Rng rng(2, RngStream::kTest);
    for (int t = 0; t < 200; ++t) {
      std::vector<Detection> gt;
      const int n_gt = 1 + static_cast<int>(rng.below(3));
      for (int i = 0; i < n_gt; ++i) gt.push_back({{i * 20.0, 0, i * 20.0 + 12, 12}, static_cast<int>(rng.below(2)), {}});
      std::vector<Detection> preds;
      const int n_p = static_cast<int>(rng.below(6));
      for (int i = 0; i < n_p; ++i) {
        const Box& g = gt[rng.below(gt.size())].box;
        const double dx = rng.uniform(-5, 5), dy = rng.uniform(-5, 5);
        preds.push_back({{g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy}, static_cast<int>(rng.below(2)), rng.uniform()});
      }
      for (int c = 0; c < 2; ++c) {
        const double a = average_precision({preds}, {gt}, c);
        const double b = oracle::exhaustive_ap(preds, gt, c);
        if (std::isnan(b)) CHECK(std::isnan(a));
        else CHECK(a == doctest::Approx(b).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("evaluate reports one AP per class within [0, 1]") {
    const auto& f = fixture();
    const TrainerConfig t;
    const auto e = evaluate(f.student(t).det, f.data.eval);
    CHECK(e.per_class_ap.size() == 3);
    CHECK(e.map >= 0.0);
    CHECK(e.map <= 1.0);
    CHECK(e.accuracy >= 0.0);
    CHECK(e.proposals > 0);
  }

  TEST_CASE("proposal targets") {
    const std::vector<Detection> gt{{{0, 0, 10, 10}, 2, {}}, {{0, 0, 10, 12}, 1, {}}};
    const std::vector<Box> p{{0, 0, 10, 10}, {0, 0, 10, 11.9}, {50, 50, 60, 60}, {0, 0, 10, 4}};
    // Best IoU wins; below 0.5 is background (class count).
    CHECK(proposal_targets(p, gt, 3) == std::vector<int>{2, 1, 3, 3});
    CHECK(proposal_targets(p, gt, 3, 0.4)[3] == 2);
  }
}

TEST_SUITE("stability report") {
  TEST_CASE("drop above ten percent after the peak is a collapse") {
    const auto r = stability_report({{0, 0.5}, {10, 0.8}, {20, 0.75}, {30, 0.7}});
    CHECK(r.peak == 0.8);
    CHECK(r.peak_step == 10);
    CHECK(r.final_value == 0.7);
    CHECK(r.drop == doctest::Approx(0.125));
    CHECK(r.collapse);
    CHECK(r.collapse_step == 30);
  }

  TEST_CASE("small drop or monotone rise is stable") {
    CHECK(!stability_report({{0, 0.5}, {10, 0.8}, {20, 0.75}}).collapse);
    const auto r = stability_report({{0, 0.1}, {10, 0.2}, {20, 0.3}});
    CHECK(!r.collapse);
    CHECK(r.drop == 0.0);
    CHECK(r.collapse_step == -1);
  }

  TEST_CASE("dip and recovery keeps the first collapse step but no collapse") {
    const auto r = stability_report({{0, 0.8}, {10, 0.6}, {20, 0.8}});
    CHECK(!r.collapse);
  }

  TEST_CASE("zero peak") {
    const auto r = stability_report({{0, 0.0}, {10, 0.0}});
    CHECK(r.drop == 0.0);
    CHECK(!r.collapse);
  }
}
