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

#include "vgsfod/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "vgsfod/errors.hpp"

namespace vgsfod {

Matrix InstanceFeatureBag::as_matrix(int class_id) const {
  const auto& rows = per_class.at(static_cast<std::size_t>(class_id));
  Matrix m(static_cast<Eigen::Index>(rows.size()), channels);
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (int k = 0; k < channels; ++k)
      m(static_cast<Eigen::Index>(r), k) = rows[r][static_cast<std::size_t>(k)];
  return m;
}

std::vector<Box> synthesize_background_boxes(const std::vector<Detection>& gt,
                                             double image_width,
                                             double image_height,
                                             double iou_max) {
  std::vector<Box> out;
  for (const auto& g : gt) {
    const Box& b = g.box;
    const Box hmirror{image_width - b.x2, b.y1, image_width - b.x1, b.y2};
    const Box vmirror{b.x1, image_height - b.y2, b.x2, image_height - b.y1};
    const Box both{image_width - b.x2, image_height - b.y2, image_width - b.x1,
                   image_height - b.y1};
    for (Box c : {hmirror, vmirror, both}) {
      c.x1 = std::clamp(c.x1, 0.0, image_width);
      c.x2 = std::clamp(c.x2, 0.0, image_width);
      c.y1 = std::clamp(c.y1, 0.0, image_height);
      c.y2 = std::clamp(c.y2, 0.0, image_height);
      if (!c.valid()) continue;
      const bool overlaps = std::any_of(gt.begin(), gt.end(), [&](const Detection& o) {
        return iou(c, o.box) >= iou_max;
      });
      if (!overlaps) out.push_back(c);
    }
  }
  return out;
}

InstanceFeatureBag pool_instances(std::span<const LabeledImage> images,
                                  int num_classes, int bins) {
  InstanceFeatureBag bag;
  bag.per_class.resize(static_cast<std::size_t>(num_classes) + 1);
  for (const auto& im : images) {
    if (bag.channels == 0) bag.channels = im.vfm->channels;
    if (im.vfm->channels != bag.channels)
      throw ValidationError("VFM maps disagree on channel count");
    for (const auto& g : *im.gt) {
      if (g.class_id < 0 || g.class_id >= num_classes)
        throw ValidationError("annotation class outside [0, C)",
                              {std::to_string(g.class_id)});
      try {
        bag.per_class[static_cast<std::size_t>(g.class_id)].push_back(
            roi_align(*im.vfm, g.box, bins));
      } catch (const DegenerateError&) {
        ++bag.skipped_degenerate;
      }
    }
  }
  return bag;
}

InstanceFeatureBag pool_labeled_instances(const DatasetIndex& index, int bins) {
  const auto ids = index.ids(Split::kLabeled);
  std::vector<FeatureMap> maps;
  maps.reserve(ids.size());
  std::vector<LabeledImage> views;
  for (const auto& id : ids) maps.push_back(load_vfm_map(index, id));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& r = index.image(ids[i]);
    views.push_back({&maps[i], &index.gt(ids[i]), static_cast<double>(r.width_px),
                     static_cast<double>(r.height_px)});
  }
  return pool_instances(views, index.num_classes, bins);
}

// ---------------------------------------------------------------------------
// K-means

namespace {

double objective_of(const Matrix& x, const Matrix& centroids, const std::vector<int>& labels) {
  double j = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    j += (x.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
  return j;
}

int nearest(const Matrix& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& x,
            double& best_d2) {
  int best = 0;
  best_d2 = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d2 = (centroids.row(c) - x).squaredNorm();
    if (d2 < best_d2) {  // ties keep the lowest index
      best_d2 = d2;
      best = static_cast<int>(c);
    }
  }
  return best;
}

double assign(const Matrix& x, const Matrix& centroids, std::vector<int>& labels,
              std::vector<double>& d2) {
  double j = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    labels[static_cast<std::size_t>(i)] = nearest(centroids, x.row(i), d2[static_cast<std::size_t>(i)]);
    j += d2[static_cast<std::size_t>(i)];
  }
  return j;
}

// Centroid of every non-empty cluster, as first member plus averaged
// offsets so that clusters of identical rows reproduce that row bit for bit.
// Rows of empty clusters are left untouched.
void cluster_means(const Matrix& x, const std::vector<int>& labels, Matrix& centroids,
                   std::vector<std::size_t>& counts) {
  const auto k = static_cast<std::size_t>(centroids.rows());
  Matrix sum = Matrix::Zero(centroids.rows(), x.cols());
  counts.assign(k, 0);
  std::vector<Eigen::Index> first(k, -1);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto c = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    if (first[c] < 0) first[c] = i;
    sum.row(static_cast<Eigen::Index>(c)) += x.row(i) - x.row(first[c]);
    ++counts[c];
  }
  for (std::size_t c = 0; c < k; ++c)
    if (counts[c] > 0)
      centroids.row(static_cast<Eigen::Index>(c)) =
          x.row(first[c]) + sum.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
}

// Hartigan single-point transfers: move a point to another cluster whenever
// that strictly lowers the objective. Lloyd fixed points are not always
// transfer-stable, so this escapes some of their local optima. Appends the
// objective after every pass with at least one move.
void transfer_refine(const Matrix& x, std::vector<int>& labels, Matrix& centroids,
                     std::vector<double>& history, int max_passes) {
  std::vector<std::size_t> counts;
  cluster_means(x, labels, centroids, counts);
  const double scale = std::max(1.0, x.squaredNorm());
  for (int pass = 0; pass < max_passes; ++pass) {
    bool moved = false;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const int a = labels[static_cast<std::size_t>(i)];
      const double na = static_cast<double>(counts[static_cast<std::size_t>(a)]);
      if (na < 2) continue;
      const double remove = na / (na - 1) * (x.row(i) - centroids.row(a)).squaredNorm();
      int best = a;
      double best_add = remove - 1e-12 * scale;
      for (Eigen::Index b = 0; b < centroids.rows(); ++b) {
        if (b == a) continue;
        const double nb = static_cast<double>(counts[static_cast<std::size_t>(b)]);
        const double add = nb / (nb + 1) * (x.row(i) - centroids.row(b)).squaredNorm();
        if (add < best_add) {
          best_add = add;
          best = static_cast<int>(b);
        }
      }
      if (best == a) continue;
      labels[static_cast<std::size_t>(i)] = best;
      cluster_means(x, labels, centroids, counts);
      moved = true;
    }
    if (!moved) break;
    history.push_back(objective_of(x, centroids, labels));
  }
}

std::size_t distinct_rows(const Matrix& x) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    seen.insert(std::vector<double>(x.row(i).data(), x.row(i).data() + x.cols()));
  return seen.size();
}

}  // namespace

double kmeans_objective(const Matrix& x, const Matrix& centroids,
                        const std::vector<int>& labels) {
  return objective_of(x, centroids, labels);
}

KMeansResult kmeans_single(const Matrix& x, int k, Rng& rng, int max_iter,
                           double tol) {
  if (x.rows() == 0) throw DomainError("kmeans: empty input");
  if (k < 1) throw DomainError("kmeans: K must be >= 1");
  const auto n = static_cast<std::size_t>(x.rows());
  KMeansResult res;
  res.centroids = Matrix(k, x.cols());

  // k-means++ seeding.
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  res.centroids.row(0) = x.row(static_cast<Eigen::Index>(rng.below(n)));
  for (int c = 1; c < k; ++c) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (x.row(static_cast<Eigen::Index>(i)) - res.centroids.row(c - 1)).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0) {
      pick = rng.below(n);
    } else {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        r -= d2[i];
        if (r < 0 && d2[i] > 0) {
          pick = i;
          break;
        }
      }
    }
    res.centroids.row(c) = x.row(static_cast<Eigen::Index>(pick));
  }

  res.labels.assign(n, 0);
  for (int it = 0; it < max_iter; ++it) {
    res.objective_history.push_back(assign(x, res.centroids, res.labels, d2));
    ++res.iterations;

    Matrix next = res.centroids;
    std::vector<std::size_t> counts;
    cluster_means(x, res.labels, next, counts);
    std::vector<bool> used(n, false);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      // Empty cluster: move it onto the worst-served point.
      std::size_t far = 0;
      double far_d2 = -1;
      for (std::size_t i = 0; i < n; ++i)
        if (!used[i] && d2[i] > far_d2) {
          far_d2 = d2[i];
          far = i;
        }
      used[far] = true;
      next.row(c) = x.row(static_cast<Eigen::Index>(far));
    }
    const double move = (next - res.centroids).rowwise().norm().maxCoeff();
    res.centroids = std::move(next);
    if (move < tol) {
      res.converged = true;
      break;
    }
  }
  assign(x, res.centroids, res.labels, d2);
  transfer_refine(x, res.labels, res.centroids, res.objective_history, max_iter);
  res.objective = assign(x, res.centroids, res.labels, d2);
  res.objective_history.push_back(res.objective);
  res.counts.assign(static_cast<std::size_t>(k), 0);
  for (int l : res.labels) ++res.counts[static_cast<std::size_t>(l)];
  res.duplicates = distinct_rows(x) < static_cast<std::size_t>(k);
  return res;
}

KMeansResult kmeans(const Matrix& x, const KMeansOptions& opts, Rng& rng) {
  if (x.rows() == 0) throw DomainError("kmeans: empty input");
  if (opts.k < 1) throw DomainError("kmeans: K must be >= 1");
  KMeansResult best;
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    KMeansResult run = kmeans_single(x, opts.k, rng, opts.max_iter, opts.tol);
    if (r == 0 || run.objective < best.objective) best = std::move(run);
  }
  return best;
}

// ---------------------------------------------------------------------------

PrototypeSet extract_prototypes(std::span<const LabeledImage> images,
                                int num_classes, const ExtractOptions& opts) {
  if (images.empty()) throw DomainError("extract_prototypes: no labeled images");
  InstanceFeatureBag bag = pool_instances(images, num_classes, opts.bins);
  auto& bg = bag.per_class[static_cast<std::size_t>(num_classes)];
  for (const auto& im : images) {
    for (const Box& b : synthesize_background_boxes(*im.gt, im.width_px,
                                                    im.height_px, opts.bg_iou)) {
      try {
        bg.push_back(roi_align(*im.vfm, b, opts.bins));
      } catch (const DegenerateError&) {
        ++bag.skipped_degenerate;
      }
    }
  }

  PrototypeSet p;
  p.channels = bag.channels;
  p.components = opts.k;
  p.num_classes = num_classes;
  std::string absent;
  for (int c = 0; c <= num_classes; ++c) {
    ClassPrototypes cp;
    cp.class_id = c;
    const auto& rows = bag.per_class[static_cast<std::size_t>(c)];
    if (rows.empty()) {
      cp.present = false;
      if (!absent.empty()) absent += ",";
      absent += c == num_classes ? "background" : std::to_string(c);
    } else {
      Rng rng(opts.seed, RngStream::kKMeans, static_cast<std::uint64_t>(c));
      KMeansResult km = kmeans(bag.as_matrix(c),
                               {opts.k, opts.max_iter, 1e-10, opts.restarts}, rng);
      cp.centroids = std::move(km.centroids);
      cp.counts = std::move(km.counts);
      cp.duplicates = km.duplicates;
    }
    p.classes.push_back(std::move(cp));
  }
  if (p.channels == 0) throw DomainError("extract_prototypes: no instances pooled");
  p.metadata["seed"] = std::to_string(opts.seed);
  p.metadata["k"] = std::to_string(opts.k);
  p.metadata["bins"] = std::to_string(opts.bins);
  p.metadata["bg_iou"] = std::to_string(opts.bg_iou);
  p.metadata["absent_classes"] = absent;
  p.metadata["labeled_images"] = std::to_string(images.size());
  p.metadata["skipped_degenerate"] = std::to_string(bag.skipped_degenerate);
  p.validate();
  return p;
}

PrototypeSet extract_prototypes(const DatasetIndex& index, const ExtractOptions& opts) {
  const auto ids = index.ids(Split::kLabeled);
  if (ids.empty()) throw DomainError("extract_prototypes: labeled split is empty");
  std::vector<FeatureMap> maps;
  maps.reserve(ids.size());
  for (const auto& id : ids) maps.push_back(load_vfm_map(index, id));
  std::vector<LabeledImage> views;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& r = index.image(ids[i]);
    views.push_back({&maps[i], &index.gt(ids[i]), static_cast<double>(r.width_px),
                     static_cast<double>(r.height_px)});
  }
  return extract_prototypes(views, index.num_classes, opts);
}

}  // namespace vgsfod
