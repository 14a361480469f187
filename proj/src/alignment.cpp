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

#include "vgsfod/alignment.hpp"

#include <algorithm>
#include <cmath>

#include "vgsfod/errors.hpp"
#include "vgsfod/kernels.hpp"

namespace vgsfod {

using nlohmann::json;

std::vector<int> QueryBatch::labels() const {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()), 0);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<std::size_t> class_query_indices(const std::vector<int>& labels, int c) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == c) out.push_back(i);
  return out;
}

Matrix collect_class_queries(const QueryBatch& batch, int c) {
  const auto idx = class_query_indices(batch.labels(), c);
  Matrix out(static_cast<Eigen::Index>(idx.size()), batch.features.cols());
  for (std::size_t r = 0; r < idx.size(); ++r)
    out.row(static_cast<Eigen::Index>(r)) = batch.features.row(static_cast<Eigen::Index>(idx[r]));
  return out;
}

// ---------------------------------------------------------------------------
// Sinkhorn

Matrix sinkhorn_random_init(Eigen::Index n, Eigen::Index k, Rng& rng) {
  Matrix m(n, k);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < k; ++j) m(i, j) = rng.normal();
  return m;
}

AssignmentMatrix sinkhorn_assign(const Matrix& init, const SinkhornOptions& opts) {
  if (init.rows() < 1 || init.cols() < 1)
    throw DomainError("sinkhorn_assign: need at least one row and one column");
  if (!init.allFinite()) throw DomainError("sinkhorn_assign: non-finite init");
  if (!(opts.eps > 0)) throw DomainError("sinkhorn_assign: eps must be positive");
  const auto n = static_cast<double>(init.rows());
  const auto k = static_cast<double>(init.cols());
  const double col_target = n / k;

  AssignmentMatrix out;
  out.a = ((init.array() - init.maxCoeff()) / opts.eps).exp().matrix();
  for (int it = 0; it < opts.max_iter; ++it) {
    for (Eigen::Index i = 0; i < out.a.rows(); ++i) {
      const double s = out.a.row(i).sum();
      if (s > 0)
        out.a.row(i) /= s;
      else
        out.a.row(i).setConstant(1.0 / k);
    }
    for (Eigen::Index j = 0; j < out.a.cols(); ++j) {
      const double s = out.a.col(j).sum();
      if (s > 0) out.a.col(j) *= col_target / s;
    }
    ++out.iterations;
    const double row_err = (out.a.rowwise().sum().array() - 1.0).abs().maxCoeff();
    const double col_err = (out.a.colwise().sum().array() - col_target).abs().maxCoeff();
    out.max_violation = std::max(row_err, col_err);
    if (out.max_violation < opts.tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

ClassPrototypeBatch aggregate_prototypes(const Matrix& q, const Matrix& a) {
  if (q.rows() != a.rows())
    throw DomainError("aggregate_prototypes: assignment rows must match queries");
  ClassPrototypeBatch out;
  out.mass = a.colwise().sum().transpose();
  out.prototypes = Matrix::Zero(a.cols(), q.cols());
  out.present.assign(static_cast<std::size_t>(a.cols()), false);
  for (Eigen::Index k = 0; k < a.cols(); ++k) {
    if (!(out.mass[k] > 1e-12)) continue;
    out.present[static_cast<std::size_t>(k)] = true;
    out.prototypes.row(k) = (a.col(k).transpose() * q) / out.mass[k];
  }
  return out;
}

Matrix aggregate_prototypes_backward(const Matrix& grad_p, const Matrix& a,
                                     const ClassPrototypeBatch& batch) {
  Matrix g = Matrix::Zero(a.rows(), grad_p.cols());
  for (Eigen::Index k = 0; k < a.cols(); ++k) {
    if (!batch.present[static_cast<std::size_t>(k)]) continue;
    g.noalias() += (a.col(k) / batch.mass[k]) * grad_p.row(k);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Heads

namespace {

Matrix uniform_matrix(int rows, int cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

Vector uniform_vector(int n, double bound, Rng& rng) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.uniform(-bound, bound);
  return v;
}

struct MlpCache {
  Matrix a1, h1, a2, h2;
};

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix mlp_forward(const Mlp& m, const Matrix& x, MlpCache& cache) {
  cache.a1 = (x * m.w1.transpose()).rowwise() + m.b1.transpose();
  cache.h1 = relu(cache.a1);
  cache.a2 = (cache.h1 * m.w2.transpose()).rowwise() + m.b2.transpose();
  cache.h2 = relu(cache.a2);
  return (cache.h2 * m.w3.transpose()).rowwise() + m.b3.transpose();
}

// ReLU subgradient is 0 at the kink.
Matrix relu_mask(const Matrix& pre, const Matrix& grad) {
  return (pre.array() > 0.0).select(grad, 0.0);
}

void mlp_backward(const Mlp& m, const Matrix& x, const MlpCache& cache,
                  const Matrix& grad_out, Mlp& g) {
  g.w3 += grad_out.transpose() * cache.h2;
  g.b3 += grad_out.colwise().sum().transpose();
  const Matrix d2 = relu_mask(cache.a2, grad_out * m.w3);
  g.w2 += d2.transpose() * cache.h1;
  g.b2 += d2.colwise().sum().transpose();
  const Matrix d1 = relu_mask(cache.a1, d2 * m.w2);
  g.w1 += d1.transpose() * x;
  g.b1 += d1.colwise().sum().transpose();
}

// d(x / |x|) backpropagation: (g - u (u . g)) / |x|.
Eigen::RowVectorXd normalize_backward(const Eigen::RowVectorXd& u, double norm,
                                      const Eigen::RowVectorXd& g) {
  if (norm < 1e-12) return Eigen::RowVectorXd::Zero(u.size());
  return (g - u * u.dot(g)) / norm;
}

}  // namespace

Mlp Mlp::init(int in, int hidden, int out, Rng& rng) {
  Mlp m;
  const double a1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double a2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  m.w1 = uniform_matrix(hidden, in, a1, rng);
  m.b1 = uniform_vector(hidden, a1, rng);
  m.w2 = uniform_matrix(hidden, hidden, a2, rng);
  m.b2 = uniform_vector(hidden, a2, rng);
  m.w3 = uniform_matrix(out, hidden, a2, rng);
  m.b3 = uniform_vector(out, a2, rng);
  return m;
}

Mlp Mlp::zeros_like(const Mlp& m) {
  Mlp z;
  z.w1 = Matrix::Zero(m.w1.rows(), m.w1.cols());
  z.w2 = Matrix::Zero(m.w2.rows(), m.w2.cols());
  z.w3 = Matrix::Zero(m.w3.rows(), m.w3.cols());
  z.b1 = Vector::Zero(m.b1.size());
  z.b2 = Vector::Zero(m.b2.size());
  z.b3 = Vector::Zero(m.b3.size());
  return z;
}

Matrix Mlp::forward(const Matrix& x) const {
  MlpCache cache;
  return mlp_forward(*this, x, cache);
}

std::size_t Mlp::parameter_count() const {
  return static_cast<std::size_t>(w1.size() + w2.size() + w3.size() + b1.size() +
                                  b2.size() + b3.size());
}

ConvHead ConvHead::init(int in, int out, Rng& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_matrix(out, in, a, rng), uniform_vector(out, a, rng)};
}

ConvHead ConvHead::zeros_like(const ConvHead& c) {
  return {Matrix::Zero(c.weight.rows(), c.weight.cols()), Vector::Zero(c.bias.size())};
}

// ---------------------------------------------------------------------------
// Instance-level contrastive loss

ContrastiveResult contrastive_loss(const std::vector<ClassPrototypeBatch>& batch,
                                   const PrototypeSet& reference, const Mlp& head,
                                   const ContrastiveOptions& opts) {
  const int num_classes = reference.num_classes;
  const int k_ref = reference.components;
  if (head.w1.cols() != reference.channels)
    throw DomainError("contrastive_loss: MLP input width must equal reference channels");
  const bool cosine = opts.mode == SimilarityMode::kCosine;
  if (cosine && !(opts.temperature > 0))
    throw DomainError("contrastive_loss: temperature must be positive");
  const double inv_t = cosine ? 1.0 / opts.temperature : 1.0;

  ContrastiveResult res;
  res.grad_mlp = Mlp::zeros_like(head);
  res.grad_prototypes.resize(batch.size());
  const auto dprime = head.w3.rows();
  for (std::size_t i = 0; i < batch.size(); ++i)
    res.grad_prototypes[i] = Matrix::Zero(batch[i].prototypes.rows(), dprime);

  // Present foreground reference prototypes, in (class, component) order.
  std::vector<std::pair<int, int>> ref_ids;
  for (int j = 0; j < num_classes; ++j) {
    const auto& cp = reference.classes[static_cast<std::size_t>(j)];
    if (!cp.present) continue;
    for (int n = 0; n < k_ref; ++n) ref_ids.emplace_back(j, n);
  }
  if (ref_ids.empty()) return res;
  Matrix r(static_cast<Eigen::Index>(ref_ids.size()), reference.channels);
  for (std::size_t m = 0; m < ref_ids.size(); ++m)
    r.row(static_cast<Eigen::Index>(m)) =
        reference.classes[static_cast<std::size_t>(ref_ids[m].first)].centroids.row(ref_ids[m].second);
  auto ref_pos = [&](int j, int n) -> Eigen::Index {
    for (std::size_t m = 0; m < ref_ids.size(); ++m)
      if (ref_ids[m].first == j && ref_ids[m].second == n) return static_cast<Eigen::Index>(m);
    return -1;
  };

  MlpCache cache;
  const Matrix z = mlp_forward(head, r, cache);
  Matrix v = z;
  Vector z_norm = z.rowwise().norm();
  if (cosine)
    for (Eigen::Index m = 0; m < z.rows(); ++m)
      v.row(m) = z_norm[m] < 1e-12 ? Eigen::RowVectorXd::Zero(z.cols()) : Eigen::RowVectorXd(z.row(m) / z_norm[m]);
  Matrix grad_v = Matrix::Zero(v.rows(), v.cols());

  for (std::size_t i = 0; i < batch.size() && static_cast<int>(i) < num_classes; ++i) {
    const auto& b = batch[i];
    if (b.prototypes.rows() != k_ref)
      throw DomainError("contrastive_loss: batch and reference component counts differ");
    for (int k = 0; k < k_ref; ++k) {
      if (!b.present[static_cast<std::size_t>(k)]) continue;
      const Eigen::Index pos = ref_pos(static_cast<int>(i), k);
      if (pos < 0) continue;
      const Eigen::RowVectorXd p = b.prototypes.row(k);
      const double p_norm = p.norm();
      const Eigen::RowVectorXd u =
          cosine ? (p_norm < 1e-12 ? Eigen::RowVectorXd::Zero(p.size()) : Eigen::RowVectorXd(p / p_norm)) : p;
      const Vector s = (v * u.transpose()) * inv_t;
      const double lse = log_sum_exp(std::span<const double>(s.data(), static_cast<std::size_t>(s.size())));
      res.loss += lse - s[pos];
      ++res.terms;
      Vector g = (s.array() - lse).exp().matrix();
      g[pos] -= 1.0;
      const Eigen::RowVectorXd grad_u = (g.transpose() * v) * inv_t;
      grad_v.noalias() += g * u * inv_t;
      res.grad_prototypes[i].row(k) = cosine ? normalize_backward(u, p_norm, grad_u) : grad_u;
    }
  }
  if (res.terms == 0) {
    res.loss = 0;
    return res;
  }
  const double scale = 1.0 / res.terms;
  res.loss *= scale;
  for (auto& g : res.grad_prototypes) g *= scale;
  grad_v *= scale;

  Matrix grad_z = grad_v;
  if (cosine)
    for (Eigen::Index m = 0; m < z.rows(); ++m)
      grad_z.row(m) = normalize_backward(v.row(m), z_norm[m], grad_v.row(m));
  mlp_backward(head, r, cache, grad_z, res.grad_mlp);
  return res;
}

// ---------------------------------------------------------------------------
// Image-level alignment

FeatureMap resize_bilinear(const FeatureMap& map, int height, int width) {
  if (height == map.height && width == map.width) return map;
  FeatureMap out(height, width, map.channels, map.stride * map.width / width);
  const double sy = static_cast<double>(map.height) / height;
  const double sx = static_cast<double>(map.width) / width;
  for (int h = 0; h < height; ++h) {
    const double y = std::clamp((h + 0.5) * sy - 0.5, 0.0, map.height - 1.0);
    for (int w = 0; w < width; ++w) {
      const double x = std::clamp((w + 0.5) * sx - 0.5, 0.0, map.width - 1.0);
      const auto v = bilinear_sample(map, x, y);
      std::copy(v.begin(), v.end(), out.cell(h, w).begin());
    }
  }
  return out;
}

ImageAlignResult image_alignment_loss(const std::vector<FeatureMap>& levels,
                                      const FeatureMap& vfm,
                                      const std::vector<ConvHead>& convs) {
  if (levels.size() != convs.size())
    throw DomainError("image_alignment_loss: one conv head per level required");
  if (levels.empty()) throw DomainError("image_alignment_loss: no levels");
  ImageAlignResult res;
  const double level_w = 1.0 / static_cast<double>(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const FeatureMap& s = levels[l];
    const ConvHead& conv = convs[l];
    if (conv.weight.rows() != vfm.channels || conv.weight.cols() != s.channels)
      throw DomainError("image_alignment_loss: conv shape does not match channels");
    const FeatureMap target = resize_bilinear(vfm, s.height, s.width);
    const Matrix y = (s.as_matrix() * conv.weight.transpose()).rowwise() + conv.bias.transpose();
    const auto t = target.as_matrix();
    const double cell_w = level_w / static_cast<double>(s.cells());
    Matrix grad_y = Matrix::Zero(y.rows(), y.cols());
    double sum = 0;
    for (Eigen::Index c = 0; c < y.rows(); ++c) {
      const double ny = y.row(c).norm();
      const double nt = t.row(c).norm();
      if (ny < 1e-12 || nt < 1e-12) {
        sum += 1.0;
        ++res.degenerate_cells;
        continue;
      }
      const Eigen::RowVectorXd yh = y.row(c) / ny;
      const Eigen::RowVectorXd th = t.row(c) / nt;
      const double cs = yh.dot(th);
      sum += 1.0 - cs;
      grad_y.row(c) = -cell_w * (th - cs * yh) / ny;
    }
    res.loss += level_w * sum / static_cast<double>(s.cells());
    ConvHead g{grad_y.transpose() * s.as_matrix(), grad_y.colwise().sum().transpose()};
    FeatureMap gs(s.height, s.width, s.channels, s.stride);
    gs.as_matrix() = grad_y * conv.weight;
    res.grad_convs.push_back(std::move(g));
    res.grad_student.push_back(std::move(gs));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Serialization

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

Matrix matrix_from_json(const json& j) {
  Matrix m(j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
  const auto& data = j.at("data");
  if (static_cast<Eigen::Index>(data.size()) != m.rows())
    throw ValidationError("matrix row count mismatch");
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const auto& row = data[static_cast<std::size_t>(r)];
    if (static_cast<Eigen::Index>(row.size()) != m.cols())
      throw ValidationError("matrix column count mismatch");
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

json vector_to_json(const Vector& v) {
  return json(std::vector<double>(v.data(), v.data() + v.size()));
}

Vector vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json mlp_to_json(const Mlp& m) {
  return json{{"w1", matrix_to_json(m.w1)}, {"b1", vector_to_json(m.b1)},
              {"w2", matrix_to_json(m.w2)}, {"b2", vector_to_json(m.b2)},
              {"w3", matrix_to_json(m.w3)}, {"b3", vector_to_json(m.b3)}};
}

Mlp mlp_from_json(const json& j) {
  Mlp m;
  m.w1 = matrix_from_json(j.at("w1"));
  m.b1 = vector_from_json(j.at("b1"));
  m.w2 = matrix_from_json(j.at("w2"));
  m.b2 = vector_from_json(j.at("b2"));
  m.w3 = matrix_from_json(j.at("w3"));
  m.b3 = vector_from_json(j.at("b3"));
  if (m.w1.rows() != m.b1.size() || m.w2.rows() != m.b2.size() ||
      m.w3.rows() != m.b3.size() || m.w2.cols() != m.w1.rows() || m.w3.cols() != m.w2.rows())
    throw ValidationError("inconsistent MLP layer dimensions");
  return m;
}

json conv_to_json(const ConvHead& c) {
  return json{{"weight", matrix_to_json(c.weight)}, {"bias", vector_to_json(c.bias)}};
}

ConvHead conv_from_json(const json& j) {
  ConvHead c{matrix_from_json(j.at("weight")), vector_from_json(j.at("bias"))};
  if (c.weight.rows() != c.bias.size()) throw ValidationError("inconsistent conv head dimensions");
  return c;
}

}  // namespace vgsfod
