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

#include "vgsfod/synth_world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <thread>

#include "vgsfod/errors.hpp"
#include "vgsfod/kernels.hpp"

namespace vgsfod {

using nlohmann::json;
namespace fs = std::filesystem;

void WorldConfig::validate() const {
  std::vector<std::string> bad;
  auto need = [&bad](bool ok, const char* field) {
    if (!ok) bad.emplace_back(field);
  };
  need(num_images > 0, "num_images");
  need(num_eval_images >= 0, "num_eval_images");
  need(grid_height > 0, "grid_height");
  need(grid_width > 0, "grid_width");
  need(stride > 0, "stride");
  need(base_channels > 0, "base_channels");
  need(vfm_channels > 0, "vfm_channels");
  need(num_classes > 0, "num_classes");
  need(objects_min > 0 && objects_max >= objects_min, "objects_min/objects_max");
  need(box_min > 0 && box_max >= box_min && box_max <= std::min(grid_height, grid_width),
       "box_min/box_max");
  need(separation_margin >= 0, "separation_margin");
  need(separation_margin < 1 || num_classes <= base_channels, "separation_margin");
  need(modes_per_class > 0, "modes_per_class");
  need(mode_spread >= 0, "mode_spread");
  need(signal_amplitude > 0, "signal_amplitude");
  need(object_noise >= 0, "object_noise");
  need(background_level >= 0, "background_level");
  need(background_noise >= 0, "background_noise");
  need(std::isfinite(shift.rotation), "shift.rotation");
  need(shift.noise_sigma >= 0, "shift.noise_sigma");
  need(labeled_fraction > 0 && labeled_fraction <= 1, "labeled_fraction");
  need(proposals.jitter_sigma >= 0, "proposals.jitter_sigma");
  need(proposals.negatives_per_image >= 0, "proposals.negatives_per_image");
  need(augment.noise_sigma >= 0, "augment.noise_sigma");
  need(augment.drop_rate >= 0 && augment.drop_rate <= 1, "augment.drop_rate");
  if (!bad.empty()) throw ValidationError("invalid world config", bad);
}

int WorldConfig::labeled_count() const {
  return std::max(1, static_cast<int>(std::lround(labeled_fraction * num_images)));
}
int WorldConfig::width_px() const { return static_cast<int>(std::lround(grid_width * stride)); }
int WorldConfig::height_px() const { return static_cast<int>(std::lround(grid_height * stride)); }

WorldConfig high_shift_config(std::uint64_t seed) {
  WorldConfig c;
  c.shift = {1.2, 0.6};
  c.seed = seed;
  return c;
}

json world_config_to_json(const WorldConfig& c) {
  return json{
      {"num_images", c.num_images},
      {"num_eval_images", c.num_eval_images},
      {"grid_height", c.grid_height},
      {"grid_width", c.grid_width},
      {"stride", c.stride},
      {"base_channels", c.base_channels},
      {"vfm_channels", c.vfm_channels},
      {"num_classes", c.num_classes},
      {"objects_min", c.objects_min},
      {"objects_max", c.objects_max},
      {"box_min", c.box_min},
      {"box_max", c.box_max},
      {"separation_margin", c.separation_margin},
      {"modes_per_class", c.modes_per_class},
      {"mode_spread", c.mode_spread},
      {"signal_amplitude", c.signal_amplitude},
      {"object_noise", c.object_noise},
      {"background_level", c.background_level},
      {"background_noise", c.background_noise},
      {"shift", {{"rotation", c.shift.rotation}, {"noise_sigma", c.shift.noise_sigma}}},
      {"labeled_fraction", c.labeled_fraction},
      {"proposals",
       {{"jitter_sigma", c.proposals.jitter_sigma},
        {"negatives_per_image", c.proposals.negatives_per_image}}},
      {"augment",
       {{"noise_sigma", c.augment.noise_sigma}, {"drop_rate", c.augment.drop_rate}}},
      {"seed", c.seed},
  };
}

WorldConfig world_config_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("world config must be a JSON object");
  const json defaults = world_config_to_json(WorldConfig{});
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
  if (!unknown.empty()) throw ValidationError("unknown world config keys", unknown);
  json m = defaults;
  m.merge_patch(j);
  WorldConfig c;
  try {
    c.num_images = m["num_images"].get<int>();
    c.num_eval_images = m["num_eval_images"].get<int>();
    c.grid_height = m["grid_height"].get<int>();
    c.grid_width = m["grid_width"].get<int>();
    c.stride = m["stride"].get<double>();
    c.base_channels = m["base_channels"].get<int>();
    c.vfm_channels = m["vfm_channels"].get<int>();
    c.num_classes = m["num_classes"].get<int>();
    c.objects_min = m["objects_min"].get<int>();
    c.objects_max = m["objects_max"].get<int>();
    c.box_min = m["box_min"].get<int>();
    c.box_max = m["box_max"].get<int>();
    c.separation_margin = m["separation_margin"].get<double>();
    c.modes_per_class = m["modes_per_class"].get<int>();
    c.mode_spread = m["mode_spread"].get<double>();
    c.signal_amplitude = m["signal_amplitude"].get<double>();
    c.object_noise = m["object_noise"].get<double>();
    c.background_level = m["background_level"].get<double>();
    c.background_noise = m["background_noise"].get<double>();
    c.shift.rotation = m["shift"]["rotation"].get<double>();
    c.shift.noise_sigma = m["shift"]["noise_sigma"].get<double>();
    c.labeled_fraction = m["labeled_fraction"].get<double>();
    c.proposals.jitter_sigma = m["proposals"]["jitter_sigma"].get<double>();
    c.proposals.negatives_per_image = m["proposals"]["negatives_per_image"].get<int>();
    c.augment.noise_sigma = m["augment"]["noise_sigma"].get<double>();
    c.augment.drop_rate = m["augment"]["drop_rate"].get<double>();
    c.seed = m["seed"].get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("world config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

Vector random_unit(int d, Rng& rng) {
  Vector v(d);
  do {
    for (int i = 0; i < d; ++i) v[i] = rng.normal();
  } while (v.norm() < 1e-9);
  return v / v.norm();
}

// Orthonormal basis of R^d (rows) from Gram-Schmidt on Gaussian vectors.
Matrix random_orthonormal(int d, Rng& rng) {
  Matrix q(d, d);
  for (int r = 0; r < d; ++r) {
    Vector v;
    for (;;) {
      v = random_unit(d, rng);
      for (int p = 0; p < r; ++p) v -= v.dot(q.row(p).transpose()) * q.row(p).transpose();
      if (v.norm() > 1e-6) break;
    }
    q.row(r) = (v / v.norm()).transpose();
  }
  return q;
}

Matrix make_class_signatures(const WorldConfig& cfg, Rng& rng) {
  const int c = cfg.num_classes, d = cfg.base_channels;
  Matrix sig(c, d);
  if (cfg.separation_margin >= 1.0) {
    const Matrix q = random_orthonormal(d, rng);
    sig = q.topRows(c);
  } else {
    const double max_cos = 1.0 - cfg.separation_margin;
    for (int r = 0; r < c; ++r) {
      int tries = 0;
      for (;;) {
        const Vector v = random_unit(d, rng);
        bool ok = true;
        for (int p = 0; p < r && ok; ++p) ok = sig.row(p).dot(v) <= max_cos;
        if (ok) {
          sig.row(r) = v.transpose();
          break;
        }
        if (++tries > 100000)
          throw ValidationError("cannot place class signatures at the requested margin",
                                {"separation_margin"});
      }
    }
  }
  // Asserted at generation time.
  const double bound = std::max(0.0, 1.0 - cfg.separation_margin) + 1e-9;
  for (int a = 0; a < c; ++a)
    for (int b = a + 1; b < c; ++b)
      if (sig.row(a).dot(sig.row(b)) > bound)
        throw ValidationError("class signatures violate the separation margin");
  return sig;
}

template <typename Fn>
void parallel_for(int n, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

constexpr std::uint64_t kSourceImageOffset = 1u << 30;

struct Placed {
  int x, y, w, h;
};

bool overlaps(const Placed& a, const Placed& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

Box clamp_box(Box b, double w, double h) {
  b.x1 = std::clamp(b.x1, 0.0, w);
  b.x2 = std::clamp(b.x2, 0.0, w);
  b.y1 = std::clamp(b.y1, 0.0, h);
  b.y2 = std::clamp(b.y2, 0.0, h);
  return b;
}

void make_image(const World& world, int index, WorldImage& img) {
  const WorldConfig& cfg = world.cfg;
  const std::uint64_t sub = static_cast<std::uint64_t>(index) +
                            (world.role == WorldRole::kSource ? kSourceImageOffset : 0);
  Rng rng(cfg.seed, RngStream::kImage, sub);
  const int hh = cfg.grid_height, ww = cfg.grid_width, d0 = cfg.base_channels;
  const double s = cfg.stride;

  char name[32];
  std::snprintf(name, sizeof name, "%s_%04d",
                world.role == WorldRole::kSource ? "src" : "img", index);
  img.id = name;

  std::vector<Placed> placed;
  const int n_obj = cfg.objects_min + static_cast<int>(rng.below(
                                          static_cast<std::uint64_t>(cfg.objects_max - cfg.objects_min + 1)));
  for (int o = 0; o < n_obj; ++o) {
    const int cls = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    const int mode = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.modes_per_class)));
    for (int attempt = 0; attempt < 50; ++attempt) {
      const auto span = static_cast<std::uint64_t>(cfg.box_max - cfg.box_min + 1);
      Placed p{};
      p.w = cfg.box_min + static_cast<int>(rng.below(span));
      p.h = cfg.box_min + static_cast<int>(rng.below(span));
      p.x = static_cast<int>(rng.below(static_cast<std::uint64_t>(ww - p.w + 1)));
      p.y = static_cast<int>(rng.below(static_cast<std::uint64_t>(hh - p.h + 1)));
      if (std::none_of(placed.begin(), placed.end(),
                       [&](const Placed& q) { return overlaps(p, q); })) {
        placed.push_back(p);
        img.gt.push_back({Box{p.x * s, p.y * s, (p.x + p.w) * s, (p.y + p.h) * s}, cls, {}});
        img.modes.push_back(mode);
        break;
      }
    }
  }

  img.base = FeatureMap(hh, ww, d0, s);
  for (int y = 0; y < hh; ++y)
    for (int x = 0; x < ww; ++x) {
      auto cell = img.base.cell(y, x);
      for (int k = 0; k < d0; ++k)
        cell[k] = cfg.background_level * world.background_signature[k] +
                  cfg.background_noise * rng.normal();
    }
  for (std::size_t o = 0; o < placed.size(); ++o) {
    const Placed& p = placed[o];
    const auto sig = world.mode_signatures[static_cast<std::size_t>(img.gt[o].class_id)]
                         .row(img.modes[o]);
    for (int y = p.y; y < p.y + p.h; ++y)
      for (int x = p.x; x < p.x + p.w; ++x) {
        auto cell = img.base.cell(y, x);
        for (int k = 0; k < d0; ++k)
          cell[k] = cfg.signal_amplitude * sig[k] + cfg.object_noise * rng.normal();
      }
  }

  img.vfm = apply_channel_map(img.base, world.vfm_projection);
  Rng noise(cfg.seed, RngStream::kShiftNoise, sub);
  img.input = apply_shift(img.base, world.shift, noise);

  // Proposals: one jittered copy per GT box (IoU >= 0.5 to its source), then
  // negatives with IoU < 0.3 to every GT box.
  const double wpx = ww * s, hpx = hh * s;
  for (const auto& g : img.gt) {
    Box best = g.box;
    for (int attempt = 0; attempt < 20; ++attempt) {
      const double jw = cfg.proposals.jitter_sigma * g.box.width();
      const double jh = cfg.proposals.jitter_sigma * g.box.height();
      const double cx = 0.5 * (g.box.x1 + g.box.x2) + jw * rng.normal();
      const double cy = 0.5 * (g.box.y1 + g.box.y2) + jh * rng.normal();
      const double bw = g.box.width() * std::exp(cfg.proposals.jitter_sigma * rng.normal());
      const double bh = g.box.height() * std::exp(cfg.proposals.jitter_sigma * rng.normal());
      const Box cand = clamp_box({cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2}, wpx, hpx);
      if (cand.valid() && iou(cand, g.box) >= 0.5) {
        best = cand;
        break;
      }
    }
    img.proposals.push_back(best);
  }
  for (int n = 0; n < cfg.proposals.negatives_per_image; ++n) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      const double bw = rng.uniform(cfg.box_min, cfg.box_max) * s;
      const double bh = rng.uniform(cfg.box_min, cfg.box_max) * s;
      const double x1 = rng.uniform(0.0, wpx - bw);
      const double y1 = rng.uniform(0.0, hpx - bh);
      const Box cand{x1, y1, x1 + bw, y1 + bh};
      if (std::all_of(img.gt.begin(), img.gt.end(),
                      [&](const Detection& g) { return iou(cand, g.box) < 0.3; })) {
        img.proposals.push_back(cand);
        break;
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

FeatureMap apply_channel_map(const FeatureMap& map, const Matrix& weight) {
  if (weight.cols() != map.channels)
    throw DomainError("channel map: weight columns must equal map channels");
  FeatureMap out(map.height, map.width, static_cast<int>(weight.rows()), map.stride);
  out.as_matrix().noalias() = map.as_matrix() * weight.transpose();
  return out;
}

FeatureMap apply_channel_map(const FeatureMap& map, const Matrix& weight,
                             const Vector& bias) {
  FeatureMap out = apply_channel_map(map, weight);
  out.as_matrix().rowwise() += bias.transpose();
  return out;
}

ShiftModel make_shift_model(int channels, const ShiftConfig& cfg, std::uint64_t seed) {
  ShiftModel m;
  m.noise_sigma = cfg.noise_sigma;
  m.rotation = Matrix::Identity(channels, channels);
  if (cfg.rotation == 0.0) return m;
  Rng rng(seed, RngStream::kWorld, 17);
  const Matrix u = random_orthonormal(channels, rng);
  Matrix block = Matrix::Identity(channels, channels);
  const double c = std::cos(cfg.rotation), s = std::sin(cfg.rotation);
  for (int p = 0; p + 1 < channels; p += 2) {
    block(p, p) = c;
    block(p, p + 1) = -s;
    block(p + 1, p) = s;
    block(p + 1, p + 1) = c;
  }
  m.rotation = u.transpose() * block * u;
  return m;
}

FeatureMap apply_shift(const FeatureMap& map, const ShiftModel& shift, Rng& rng) {
  FeatureMap out = apply_channel_map(map, shift.rotation);
  if (shift.noise_sigma > 0)
    for (double& v : out.data) v += shift.noise_sigma * rng.normal();
  return out;
}

FeatureMap strong_augment(const FeatureMap& map, const AugmentConfig& cfg, Rng& rng) {
  FeatureMap out = map;
  if (cfg.noise_sigma > 0)
    for (double& v : out.data) v += cfg.noise_sigma * rng.normal();
  if (cfg.drop_rate > 0) {
    std::vector<bool> drop(static_cast<std::size_t>(map.channels));
    for (std::size_t k = 0; k < drop.size(); ++k) drop[k] = rng.uniform() < cfg.drop_rate;
    const auto c = static_cast<std::size_t>(map.channels);
    for (std::size_t i = 0; i < out.data.size(); ++i)
      if (drop[i % c]) out.data[i] = 0.0;
  }
  return out;
}

std::vector<int> split_permutation(int num_images, std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(num_images));
  for (int i = 0; i < num_images; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(seed, RngStream::kSplit);
  for (int i = num_images - 1; i > 0; --i) {
    const auto j = rng.below(static_cast<std::uint64_t>(i + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
  }
  return perm;
}

std::vector<const WorldImage*> World::split(Split s) const {
  std::vector<const WorldImage*> out;
  for (const auto& img : images)
    if (img.split == s) out.push_back(&img);
  return out;
}

const WorldImage& World::image(const std::string& id) const {
  for (const auto& img : images)
    if (img.id == id) return img;
  throw ValidationError("unknown image id", {id});
}

Vector World::vfm_signature(int c) const {
  return vfm_projection * class_signatures.row(c).transpose();
}

World generate_world(const WorldConfig& cfg, WorldRole role, int workers) {
  cfg.validate();
  World w;
  w.cfg = cfg;
  w.role = role;
  Rng rng(cfg.seed, RngStream::kWorld);
  w.class_signatures = make_class_signatures(cfg, rng);
  for (int c = 0; c < cfg.num_classes; ++c) {
    Matrix modes(cfg.modes_per_class, cfg.base_channels);
    for (int m = 0; m < cfg.modes_per_class; ++m) {
      Vector v = w.class_signatures.row(c).transpose() +
                 cfg.mode_spread * random_unit(cfg.base_channels, rng);
      modes.row(m) = (v / v.norm()).transpose();
    }
    w.mode_signatures.push_back(std::move(modes));
  }
  w.background_signature = random_unit(cfg.base_channels, rng);
  w.vfm_projection = Matrix(cfg.vfm_channels, cfg.base_channels);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.vfm_channels));
  for (int r = 0; r < cfg.vfm_channels; ++r)
    for (int k = 0; k < cfg.base_channels; ++k) w.vfm_projection(r, k) = scale * rng.normal();
  ShiftConfig shift = role == WorldRole::kSource ? ShiftConfig{} : cfg.shift;
  w.shift = make_shift_model(cfg.base_channels, shift, cfg.seed);

  const int total = cfg.num_images + cfg.num_eval_images;
  w.images.resize(static_cast<std::size_t>(total));
  parallel_for(total, workers, [&](int i) { make_image(w, i, w.images[static_cast<std::size_t>(i)]); });

  const auto perm = split_permutation(cfg.num_images, cfg.seed);
  const int n_lab = cfg.labeled_count();
  for (int r = 0; r < cfg.num_images; ++r)
    w.images[static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])].split =
        r < n_lab ? Split::kLabeled : Split::kUnlabeled;
  for (int i = cfg.num_images; i < total; ++i) w.images[static_cast<std::size_t>(i)].split = Split::kEval;
  return w;
}

DatasetIndex write_world(const World& world, const fs::path& dir) {
  fs::create_directories(dir);
  DatasetIndex idx;
  idx.num_classes = world.cfg.num_classes;
  idx.root = dir;
  for (const auto& img : world.images) {
    ImageRecord r;
    r.image_id = img.id;
    r.feature_file = img.id + ".vgfm";
    r.input_file = img.id + ".input.vgfm";
    r.width_px = world.cfg.width_px();
    r.height_px = world.cfg.height_px();
    r.stride = world.cfg.stride;
    write_feature_map(dir / r.feature_file, img.vfm);
    write_feature_map(dir / r.input_file, img.input);
    idx.images.push_back(std::move(r));
    idx.annotations[img.id] = img.gt;
    idx.proposals[img.id] = img.proposals;
    idx.splits[img.id] = img.split;
  }
  std::sort(idx.images.begin(), idx.images.end(),
            [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
  idx.metadata = json{{"world", world_config_to_json(world.cfg)},
                      {"role", world.role == WorldRole::kSource ? "source" : "target"}};
  write_dataset(dir / "index.json", idx);
  return idx;
}

}  // namespace vgsfod
