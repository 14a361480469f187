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


#include <fstream>
#include <iterator>

#include "doctest.h"
#include "test_util.hpp"
#include "vgsfod/errors.hpp"
#include "vgsfod/kernels.hpp"
#include "vgsfod/synth_world.hpp"

using namespace vgsfod;
namespace fs = std::filesystem;
using vgsfod::testing::random_map;
using vgsfod::testing::scratch_dir;

namespace {

WorldConfig small_world(std::uint64_t seed = 3) {
  WorldConfig c;
  c.num_images = 24;
  c.num_eval_images = 6;
  c.seed = seed;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

double cell_norm(const FeatureMap& m, int h, int w) {
  double s = 0;
  for (double v : m.cell(h, w)) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST_SUITE("world config") {
  TEST_CASE("labeled count is forced arithmetic") {
    WorldConfig c;
    c.num_images = 200;
    c.labeled_fraction = 0.05;
    CHECK(c.labeled_count() == 10);
    c.labeled_fraction = 0.01;
    CHECK(c.labeled_count() == 2);
    c.labeled_fraction = 0.10;
    CHECK(c.labeled_count() == 20);
  }

  TEST_CASE("invalid configs name the offending fields") {
    WorldConfig c;
    c.labeled_fraction = 0;
    c.num_classes = 0;
    try {
      c.validate();
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::find(e.offending().begin(), e.offending().end(), "labeled_fraction") != e.offending().end());
      CHECK(std::find(e.offending().begin(), e.offending().end(), "num_classes") != e.offending().end());
    }
    WorldConfig d;
    d.box_max = d.grid_width + 1;
    CHECK_THROWS_AS(d.validate(), ValidationError);
    WorldConfig e;
    e.labeled_fraction = 1.5;
    CHECK_THROWS_AS(generate_world(e), ValidationError);
  }

  TEST_CASE("json round trip and unknown keys") {
    WorldConfig c = high_shift_config(9);
    c.proposals.negatives_per_image = 6;
    const auto j = world_config_to_json(c);
    CHECK(world_config_to_json(world_config_from_json(j)) == j);
    CHECK(world_config_from_json({{"num_images", 50}}).num_images == 50);
    CHECK(world_config_from_json({{"num_images", 50}}).grid_width == WorldConfig{}.grid_width);
    CHECK_THROWS_AS(world_config_from_json({{"num_imgs", 50}}), ValidationError);
  }

  TEST_CASE("high-shift preset only strengthens the shift") {
    const WorldConfig h = high_shift_config(4), s;
    CHECK(h.seed == 4);
    CHECK(h.shift.rotation > s.shift.rotation);
    CHECK(h.shift.noise_sigma > s.shift.noise_sigma);
    CHECK(h.num_images == s.num_images);
  }
}

TEST_SUITE("generate world") {
  TEST_CASE("same config twice gives byte-identical files") {
    const World a = generate_world(small_world());
    const World b = generate_world(small_world());
    const fs::path da = scratch_dir("world_a"), db = scratch_dir("world_b");
    write_world(a, da);
    write_world(b, db);
    std::size_t n = 0;
    for (const auto& e : fs::directory_iterator(da)) {
      CHECK(slurp(e.path()) == slurp(db / e.path().filename()));
      ++n;
    }
    CHECK(n == 2 * 30 + 1);
  }

  TEST_CASE("maps do not depend on the number of workers") {
    const World a = generate_world(small_world(), WorldRole::kTarget, 1);
    const World b = generate_world(small_world(), WorldRole::kTarget, 4);
    REQUIRE(a.images.size() == b.images.size());
    for (std::size_t i = 0; i < a.images.size(); ++i) {
      CHECK(a.images[i].vfm.data == b.images[i].vfm.data);
      CHECK(a.images[i].input.data == b.images[i].input.data);
      CHECK(a.images[i].proposals == b.images[i].proposals);
    }
  }

  TEST_CASE("splits") {
    WorldConfig c;
    c.num_images = 200;
    c.num_eval_images = 5;
    const World w = generate_world(c);
    CHECK(w.split(Split::kLabeled).size() == 10);
    CHECK(w.split(Split::kUnlabeled).size() == 190);
    CHECK(w.split(Split::kEval).size() == 5);
    const auto perm = split_permutation(200, c.seed);
    for (int i = 0; i < 10; ++i) CHECK(w.images[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])].split == Split::kLabeled);
  }

  TEST_CASE("signatures respect the separation margin") {
    for (double margin : {1.0, 2.0}) {
      WorldConfig c = small_world();
      c.separation_margin = margin;
      const World w = generate_world(c);
      for (int a = 0; a < c.num_classes; ++a) {
        CHECK(w.class_signatures.row(a).norm() == doctest::Approx(1.0).epsilon(1e-12));
        for (int b = a + 1; b < c.num_classes; ++b)
          CHECK(std::abs(w.class_signatures.row(a).dot(w.class_signatures.row(b))) <= 1e-12);
      }
    }
    WorldConfig loose = small_world();
    loose.separation_margin = 0.3;
    const World w = generate_world(loose);
    for (int a = 0; a < loose.num_classes; ++a)
      for (int b = a + 1; b < loose.num_classes; ++b)
        CHECK(w.class_signatures.row(a).dot(w.class_signatures.row(b)) <= 0.7 + 1e-12);
  }

  TEST_CASE("orthogonal world: pooled object features point at their own class") {
    WorldConfig c = small_world();
    c.separation_margin = 2.0;
    const World w = generate_world(c);
    int checked = 0;
    for (const auto& im : w.images)
      for (const auto& g : im.gt) {
        const auto f = roi_align(im.base, g.box);
        const double own = cosine_similarity(f, std::vector<double>(w.class_signatures.row(g.class_id).begin(), w.class_signatures.row(g.class_id).end()));
        for (int o = 0; o < c.num_classes; ++o) {
          if (o == g.class_id) continue;
          const double other = cosine_similarity(f, std::vector<double>(w.class_signatures.row(o).begin(), w.class_signatures.row(o).end()));
          CHECK(own > other);
        }
        ++checked;
      }
    CHECK(checked >= 60);
  }

  TEST_CASE("proposals: one jittered copy per object then negatives with IoU < 0.3") {
    const World w = generate_world(small_world(5));
    for (const auto& im : w.images) {
      REQUIRE(im.proposals.size() >= im.gt.size());
      for (std::size_t i = 0; i < im.gt.size(); ++i) CHECK(iou(im.proposals[i], im.gt[i].box) >= 0.5);
      for (std::size_t i = im.gt.size(); i < im.proposals.size(); ++i)
        for (const auto& g : im.gt) CHECK(iou(im.proposals[i], g.box) < 0.3);
      CHECK(im.proposals.size() <= im.gt.size() + 4);
    }
  }

  TEST_CASE("vfm map is the fixed linear map of the unshifted base") {
    const World w = generate_world(small_world());
    for (const auto& im : w.images) {
      const FeatureMap g = apply_channel_map(im.base, w.vfm_projection);
      CHECK(g.data == im.vfm.data);
    }
  }

  TEST_CASE("detector input replays from the seeded noise stream") {
    const WorldConfig c = small_world();
    const World w = generate_world(c);
    for (std::size_t i = 0; i < w.images.size(); ++i) {
      Rng noise(c.seed, RngStream::kShiftNoise, i);
      CHECK(apply_shift(w.images[i].base, w.shift, noise).data == w.images[i].input.data);
    }
  }

  TEST_CASE("source role is unshifted and uses different images") {
    const World t = generate_world(small_world());
    const World s = generate_world(small_world(), WorldRole::kSource);
    CHECK(s.class_signatures == t.class_signatures);
    CHECK(s.vfm_projection == t.vfm_projection);
    CHECK(s.images[0].base.data != t.images[0].base.data);
    for (const auto& im : s.images) CHECK(im.input.data == im.base.data);
  }
}

TEST_SUITE("shift and augmentation") {
  TEST_CASE("zero rotation and zero noise is the identity") {
    Rng rng(1, RngStream::kTest);
    const FeatureMap m = random_map(5, 5, 8, 8.0, rng);
    const ShiftModel s = make_shift_model(8, {0.0, 0.0}, 3);
    Rng r(2);
    CHECK(apply_shift(m, s, r).data == m.data);
  }

  TEST_CASE("noise-free rotation preserves per-cell norms") {
    Rng rng(2, RngStream::kTest);
    const FeatureMap m = random_map(6, 7, 8, 8.0, rng);
    const ShiftModel s = make_shift_model(8, {1.1, 0.0}, 5);
    CHECK((s.rotation * s.rotation.transpose() - Matrix::Identity(8, 8)).cwiseAbs().maxCoeff() < 1e-12);
    Rng r(3);
    const FeatureMap out = apply_shift(m, s, r);
    CHECK(out.data != m.data);
    for (int h = 0; h < 6; ++h)
      for (int w = 0; w < 7; ++w) CHECK(std::abs(cell_norm(out, h, w) - cell_norm(m, h, w)) <= 1e-9);
  }

  TEST_CASE("noise replays from a reseeded stream") {
    Rng rng(3, RngStream::kTest);
    const FeatureMap m = random_map(4, 4, 6, 8.0, rng);
    const ShiftModel s = make_shift_model(6, {0.5, 0.1}, 8);
    Rng a(77, RngStream::kShiftNoise, 2);
    const FeatureMap out = apply_shift(m, s, a);
    Rng b(77, RngStream::kShiftNoise, 2);
    const FeatureMap rotated = apply_channel_map(m, s.rotation);
    for (std::size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == rotated.data[i] + 0.1 * b.normal());
  }

  TEST_CASE("strong augmentation") {
    Rng rng(4, RngStream::kTest);
    const FeatureMap m = random_map(5, 5, 6, 8.0, rng);
    Rng r1(1);
    CHECK(strong_augment(m, {0.0, 0.0}, r1).data == m.data);
    for (double v : strong_augment(m, {0.3, 1.0}, r1).data) CHECK(v == 0.0);
    Rng a(9), b(9);
    CHECK(strong_augment(m, {0.2, 0.3}, a).data == strong_augment(m, {0.2, 0.3}, b).data);
    // Dropped channels are zero in every cell.
    Rng c(10);
    const FeatureMap d = strong_augment(m, {0.0, 0.5}, c);
    for (int k = 0; k < 6; ++k) {
      bool all_zero = true, any_zero = false;
      for (int h = 0; h < 5; ++h)
        for (int w = 0; w < 5; ++w) {
          all_zero = all_zero && d.cell(h, w)[static_cast<std::size_t>(k)] == 0.0;
          any_zero = any_zero || d.cell(h, w)[static_cast<std::size_t>(k)] == 0.0;
        }
      CHECK(all_zero == any_zero);
    }
  }
}
