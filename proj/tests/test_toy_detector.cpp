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

#include "doctest.h"
#include "test_util.hpp"
#include "vgsfod/errors.hpp"
#include "vgsfod/toy_detector.hpp"

using namespace vgsfod;
using vgsfod::testing::fd_norm_check;
using vgsfod::testing::random_box;
using vgsfod::testing::random_map;
using vgsfod::testing::random_matrix;

namespace {

double kink_gap(const ToyDetector& d, const FeatureMap& input) {
  double m = 1e300;
  for (double v : forward(d, input, {}, 3).pre_activation.data) m = std::min(m, std::abs(v));
  return m;
}

// Scalar objective touching every backward input: CE on logits plus fixed
// linear probes on the queries and both feature levels.
struct Probe {
  std::vector<int> targets;
  Matrix wq;
  std::vector<FeatureMap> wl;

  double operator()(const ToyDetector& d, const FeatureMap& in, const std::vector<Box>& props) const {
    const auto f = forward(d, in, props, 3);
    double v = detection_loss(f.logits, targets).value + (f.queries.array() * wq.array()).sum();
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t i = 0; i < wl[l].data.size(); ++i) v += wl[l].data[i] * f.levels[l].data[i];
    return v;
  }
};

}  // namespace

TEST_SUITE("toy detector") {
  TEST_CASE("backward matches central differences with every gradient path") {
    Rng rng(1, RngStream::kTest);
    for (int t = 0; t < 16; ++t) {
      ToyDetector d = ToyDetector::init(4, 5, 3, rng, t % 2 == 1);
      FeatureMap input = random_map(7 + static_cast<int>(rng.below(2)), 8, 4, 4.0, rng);
      while (d.relu && kink_gap(d, input) < 1e-4) input = random_map(input.height, 8, 4, 4.0, rng);
      std::vector<Box> props;
      const int n = 1 + static_cast<int>(rng.below(5));
      for (int i = 0; i < n; ++i) props.push_back(random_box(32, 4.0 * input.height, 6, rng));
      const auto f = forward(d, input, props, 3);
      Probe p;
      for (int i = 0; i < n; ++i) p.targets.push_back(static_cast<int>(rng.below(4)));
      p.wq = random_matrix(n, 5, rng);
      p.wl = {random_map(f.levels[0].height, f.levels[0].width, 5, 4.0, rng),
              random_map(f.levels[1].height, f.levels[1].width, 5, 8.0, rng)};
      const auto lv = detection_loss(f.logits, p.targets);
      ToyDetector g = ToyDetector::zeros_like(d);
      backward(d, input, f, lv.grad, &p.wq, &p.wl, g);
      auto loss = [&] { return p(d, input, props); };
      CHECK(fd_norm_check(d.backbone_w.data(), g.backbone_w.data(), static_cast<std::size_t>(d.backbone_w.size()), loss) <= 1e-7);
      CHECK(fd_norm_check(d.backbone_b.data(), g.backbone_b.data(), static_cast<std::size_t>(d.backbone_b.size()), loss) <= 1e-7);
      CHECK(fd_norm_check(d.cls_w.data(), g.cls_w.data(), static_cast<std::size_t>(d.cls_w.size()), loss) <= 1e-7);
      CHECK(fd_norm_check(d.cls_b.data(), g.cls_b.data(), static_cast<std::size_t>(d.cls_b.size()), loss) <= 1e-7);
    }
  }

  TEST_CASE("backward accumulates into the gradient buffer") {
    Rng rng(2, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(3, 4, 2, rng);
    const FeatureMap in = random_map(6, 6, 3, 4.0, rng);
    const std::vector<Box> props{{2, 2, 14, 14}};
    const auto f = forward(d, in, props);
    const Matrix gl = random_matrix(1, 3, rng);
    ToyDetector once = ToyDetector::zeros_like(d), twice = ToyDetector::zeros_like(d);
    backward(d, in, f, gl, nullptr, nullptr, once);
    backward(d, in, f, gl, nullptr, nullptr, twice);
    backward(d, in, f, gl, nullptr, nullptr, twice);
    CHECK((twice.backbone_w - 2 * once.backbone_w).cwiseAbs().maxCoeff() <= 1e-14);
    CHECK((twice.cls_b - 2 * once.cls_b).cwiseAbs().maxCoeff() <= 1e-14);
  }

  TEST_CASE("degenerate proposals are skipped and the rest keep their order") {
    Rng rng(3, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(3, 4, 2, rng);
    const FeatureMap in = random_map(6, 6, 3, 4.0, rng);
    const std::vector<Box> props{{2, 2, 10, 10}, {5, 5, 5, 9}, {100, 100, 120, 120}, {0, 0, 24, 24}};
    const auto f = forward(d, in, props);
    CHECK(f.kept == std::vector<std::size_t>{0, 3});
    CHECK(f.skipped.size() == 2);
    CHECK(f.logits.rows() == 2);
    CHECK(f.query_batch().logits.cols() == 2);
  }

  TEST_CASE("level shapes and pooled level") {
    Rng rng(4, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(2, 3, 2, rng);
    const auto f = forward(d, random_map(7, 5, 2, 8.0, rng), {});
    CHECK(f.levels[0].height == 7);
    CHECK(f.levels[1].height == 3);
    CHECK(f.levels[1].width == 2);
    CHECK(f.levels[1].stride == 16.0);
    CHECK(f.levels[1].cell(1, 1)[2] ==
          doctest::Approx((f.levels[0].cell(2, 2)[2] + f.levels[0].cell(2, 3)[2] + f.levels[0].cell(3, 2)[2] + f.levels[0].cell(3, 3)[2]) / 4));
    CHECK_THROWS_AS(forward(d, random_map(4, 4, 3, 8.0, rng), {}), DomainError);
  }

  TEST_CASE("relu clamps the native level only through the activation") {
    Rng rng(5, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(3, 6, 2, rng, true);
    const auto f = forward(d, random_map(4, 4, 3, 4.0, rng), {});
    for (std::size_t i = 0; i < f.levels[0].data.size(); ++i)
      CHECK(f.levels[0].data[i] == std::max(0.0, f.pre_activation.data[i]));
  }

  TEST_CASE("flatten and assign are inverse") {
    Rng rng(6, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(3, 4, 2, rng);
    auto flat = d.flatten();
    CHECK(flat.size() == d.parameter_count());
    CHECK(d.parameter_count() == 4 * 3 + 4 + 3 * 4 + 3);
    ToyDetector e = ToyDetector::zeros_like(d);
    e.assign(flat);
    CHECK(e.flatten() == flat);
    CHECK(parameter_hash(e.flatten()) == parameter_hash(flat));
    flat[5] = std::nextafter(flat[5], 1e9);
    CHECK(parameter_hash(flat) != parameter_hash(d.flatten()));
    CHECK(parameter_hash(flat).size() == 16);
  }
}

TEST_SUITE("detection loss") {
  TEST_CASE("uniform logits give ln of the column count") {
    for (int cols : {2, 4, 7}) {
      const Matrix l = Matrix::Constant(5, cols, 0.3);
      const std::vector<int> t(5, 1);
      CHECK(detection_loss(l, t).value == doctest::Approx(std::log(static_cast<double>(cols))).epsilon(1e-14));
    }
  }

  TEST_CASE("gradient rows sum to zero and match central differences") {
    Rng rng(7, RngStream::kTest);
    Matrix l = random_matrix(6, 4, rng, 3.0);
    const std::vector<int> t{0, 3, 2, 2, 1, 0};
    const auto v = detection_loss(l, t);
    CHECK(v.grad.rowwise().sum().cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(fd_norm_check(l.data(), v.grad.data(), static_cast<std::size_t>(l.size()), [&] { return detection_loss(l, t).value; }) <= 1e-8);
  }

  TEST_CASE("empty batch and bad targets") {
    CHECK(detection_loss(Matrix(0, 3), std::vector<int>{}).value == 0.0);
    CHECK_THROWS_AS(detection_loss(Matrix::Zero(2, 3), std::vector<int>{0}), DomainError);
    CHECK_THROWS_AS(detection_loss(Matrix::Zero(1, 3), std::vector<int>{3}), DomainError);
  }
}

TEST_SUITE("ema") {
  TEST_CASE("fixed student gives the geometric closed form") {
    Rng rng(8, RngStream::kTest);
    std::vector<double> t(30), s(30), t0;
    for (auto& v : t) v = rng.normal();
    for (auto& v : s) v = rng.normal();
    t0 = t;
    for (int n = 0; n < 50; ++n) ema_update(t, s, 0.999);
    for (std::size_t i = 0; i < t.size(); ++i)
      CHECK(std::abs(t[i] - (s[i] + std::pow(0.999, 50) * (t0[i] - s[i]))) <= 1e-12);
  }

  TEST_CASE("each step stays inside the teacher-student segment") {
    Rng rng(9, RngStream::kTest);
    for (int k = 0; k < 200; ++k) {
      std::vector<double> t{rng.normal()}, s{rng.normal()};
      const double lo = std::min(t[0], s[0]), hi = std::max(t[0], s[0]);
      ema_update(t, s, rng.uniform());
      CHECK(t[0] >= lo);
      CHECK(t[0] <= hi);
    }
  }

  TEST_CASE("alpha 1 freezes, alpha 0 copies") {
    Rng rng(10, RngStream::kTest);
    ToyDetector teacher = ToyDetector::init(3, 4, 2, rng);
    const ToyDetector student = ToyDetector::init(3, 4, 2, rng);
    const auto before = teacher.flatten();
    ema_update(teacher, student, 1.0);
    CHECK(teacher.flatten() == before);
    ema_update(teacher, student, 0.0);
    CHECK(teacher.flatten() == student.flatten());
    ToyDetector other = ToyDetector::init(3, 5, 2, rng);
    CHECK_THROWS_AS(ema_update(other, student, 0.5), DomainError);
  }
}

TEST_SUITE("detector json") {
  TEST_CASE("round trip is bit exact") {
    Rng rng(11, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(5, 6, 3, rng, true);
    const ToyDetector e = detector_from_json(nlohmann::json::parse(detector_to_json(d).dump()));
    CHECK(e.flatten() == d.flatten());
    CHECK(e.relu);
  }

  TEST_CASE("inconsistent or non-finite checkpoints are rejected") {
    Rng rng(12, RngStream::kTest);
    const ToyDetector d = ToyDetector::init(3, 4, 2, rng);
    auto j = detector_to_json(d);
    j["cls_b"] = vector_to_json(Vector::Zero(5));
    CHECK_THROWS_AS(detector_from_json(j), ValidationError);
    ToyDetector bad = d;
    bad.cls_w(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS(detector_from_json(nlohmann::json::parse(detector_to_json(bad).dump())));
  }
}
