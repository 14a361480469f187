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

#include "vgsfod/toy_detector.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>

#include "vgsfod/errors.hpp"

namespace vgsfod {

using nlohmann::json;

ToyDetector ToyDetector::init(int in_channels, int query_dim, int num_classes, Rng& rng,
                              bool relu) {
  ToyDetector d;
  d.relu = relu;
  const double a = 1.0 / std::sqrt(static_cast<double>(in_channels));
  const double b = 1.0 / std::sqrt(static_cast<double>(query_dim));
  d.backbone_w = Matrix(query_dim, in_channels);
  for (Eigen::Index i = 0; i < d.backbone_w.size(); ++i) d.backbone_w.data()[i] = rng.uniform(-a, a);
  d.backbone_b = Vector::Zero(query_dim);
  d.cls_w = Matrix(num_classes + 1, query_dim);
  for (Eigen::Index i = 0; i < d.cls_w.size(); ++i) d.cls_w.data()[i] = rng.uniform(-b, b);
  d.cls_b = Vector::Zero(num_classes + 1);
  return d;
}

ToyDetector ToyDetector::zeros_like(const ToyDetector& d) {
  ToyDetector z;
  z.relu = d.relu;
  z.backbone_w = Matrix::Zero(d.backbone_w.rows(), d.backbone_w.cols());
  z.backbone_b = Vector::Zero(d.backbone_b.size());
  z.cls_w = Matrix::Zero(d.cls_w.rows(), d.cls_w.cols());
  z.cls_b = Vector::Zero(d.cls_b.size());
  return z;
}

std::size_t ToyDetector::parameter_count() const {
  return static_cast<std::size_t>(backbone_w.size() + backbone_b.size() + cls_w.size() +
                                  cls_b.size());
}

std::vector<double> ToyDetector::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  out.insert(out.end(), backbone_w.data(), backbone_w.data() + backbone_w.size());
  out.insert(out.end(), backbone_b.data(), backbone_b.data() + backbone_b.size());
  out.insert(out.end(), cls_w.data(), cls_w.data() + cls_w.size());
  out.insert(out.end(), cls_b.data(), cls_b.data() + cls_b.size());
  return out;
}

void ToyDetector::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count())
    throw DomainError("ToyDetector::assign: parameter count mismatch");
  const double* p = flat.data();
  auto take = [&p](double* dst, Eigen::Index n) {
    std::memcpy(dst, p, static_cast<std::size_t>(n) * sizeof(double));
    p += n;
  };
  take(backbone_w.data(), backbone_w.size());
  take(backbone_b.data(), backbone_b.size());
  take(cls_w.data(), cls_w.size());
  take(cls_b.data(), cls_b.size());
}

QueryBatch DetectorForward::query_batch() const {
  return {queries, logits.leftCols(logits.cols() - 1)};
}

FeatureMap avg_pool2x2(const FeatureMap& map) {
  const int h = std::max(1, map.height / 2), w = std::max(1, map.width / 2);
  FeatureMap out(h, w, map.channels, map.stride * 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      auto dst = out.cell(y, x);
      int n = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sy = 2 * y + dy, sx = 2 * x + dx;
          if (sy >= map.height || sx >= map.width) continue;
          const auto src = map.cell(sy, sx);
          for (int c = 0; c < map.channels; ++c) dst[c] += src[c];
          ++n;
        }
      for (double& v : dst) v /= n;
    }
  return out;
}

namespace {

void avg_pool2x2_backward(const FeatureMap& grad_out, FeatureMap& grad_in) {
  for (int y = 0; y < grad_out.height; ++y)
    for (int x = 0; x < grad_out.width; ++x) {
      int n = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          if (2 * y + dy < grad_in.height && 2 * x + dx < grad_in.width) ++n;
      const auto g = grad_out.cell(y, x);
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const int sy = 2 * y + dy, sx = 2 * x + dx;
          if (sy >= grad_in.height || sx >= grad_in.width) continue;
          auto dst = grad_in.cell(sy, sx);
          for (int c = 0; c < grad_in.channels; ++c) dst[c] += g[c] / n;
        }
    }
}

}  // namespace

DetectorForward forward(const ToyDetector& det, const FeatureMap& input,
                        std::span<const Box> proposals, int bins) {
  if (input.channels != det.in_channels())
    throw DomainError("forward: input channels do not match the backbone");
  DetectorForward f;
  f.pre_activation = FeatureMap(input.height, input.width, det.query_dim(), input.stride);
  f.pre_activation.as_matrix().noalias() = input.as_matrix() * det.backbone_w.transpose();
  f.pre_activation.as_matrix().rowwise() += det.backbone_b.transpose();
  FeatureMap level0 = f.pre_activation;
  if (det.relu)
    for (double& v : level0.data) v = std::max(v, 0.0);
  f.levels.push_back(std::move(level0));
  f.levels.push_back(avg_pool2x2(f.levels[0]));

  const FeatureMap& base = f.levels[0];
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    try {
      f.plans.push_back(make_roi_plan(base.height, base.width, base.stride, proposals[i], bins));
      f.kept.push_back(i);
    } catch (const DegenerateError&) {
      f.skipped.push_back(i);
    } catch (const DomainError&) {
      f.skipped.push_back(i);
    }
  }
  f.queries = Matrix(static_cast<Eigen::Index>(f.kept.size()), det.query_dim());
  for (std::size_t r = 0; r < f.plans.size(); ++r)
    apply_roi_plan(base, f.plans[r],
                   std::span<double>(f.queries.row(static_cast<Eigen::Index>(r)).data(),
                                     static_cast<std::size_t>(det.query_dim())));
  f.logits = (f.queries * det.cls_w.transpose()).rowwise() + det.cls_b.transpose();
  return f;
}

void backward(const ToyDetector& det, const FeatureMap& input, const DetectorForward& fwd,
              const Matrix& grad_logits, const Matrix* grad_queries,
              const std::vector<FeatureMap>* grad_levels, ToyDetector& grad) {
  grad.cls_w.noalias() += grad_logits.transpose() * fwd.queries;
  grad.cls_b += grad_logits.colwise().sum().transpose();
  Matrix gq = grad_logits * det.cls_w;
  if (grad_queries) gq += *grad_queries;

  const FeatureMap& base = fwd.levels[0];
  FeatureMap g0(base.height, base.width, base.channels, base.stride);
  for (std::size_t r = 0; r < fwd.plans.size(); ++r)
    scatter_roi_plan(fwd.plans[r],
                     std::span<const double>(gq.row(static_cast<Eigen::Index>(r)).data(),
                                             static_cast<std::size_t>(gq.cols())),
                     g0);
  if (grad_levels) {
    if (!grad_levels->empty()) g0.as_matrix() += (*grad_levels)[0].as_matrix();
    if (grad_levels->size() > 1) avg_pool2x2_backward((*grad_levels)[1], g0);
  }
  if (det.relu)
    for (std::size_t i = 0; i < g0.data.size(); ++i)
      if (!(fwd.pre_activation.data[i] > 0)) g0.data[i] = 0.0;
  grad.backbone_w.noalias() += g0.as_matrix().transpose() * input.as_matrix();
  grad.backbone_b += g0.as_matrix().colwise().sum().transpose();
}

LossValue detection_loss(const Matrix& logits, std::span<const int> targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size())
    throw DomainError("detection_loss: one target per row required");
  LossValue out;
  out.grad = Matrix::Zero(logits.rows(), logits.cols());
  if (logits.rows() == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= logits.cols()) throw DomainError("detection_loss: target out of range");
    const std::span<const double> row(logits.row(i).data(), static_cast<std::size_t>(logits.cols()));
    const double lse = log_sum_exp(row);
    out.value += (lse - logits(i, t)) * inv_n;
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      out.grad(i, c) = std::exp(logits(i, c) - lse) * inv_n;
    out.grad(i, t) -= inv_n;
  }
  return out;
}

void ema_update(std::span<double> teacher, std::span<const double> student, double alpha) {
  if (teacher.size() != student.size()) throw DomainError("ema_update: shape mismatch");
  for (std::size_t i = 0; i < teacher.size(); ++i)
    teacher[i] = alpha * teacher[i] + (1.0 - alpha) * student[i];
}

void ema_update(ToyDetector& teacher, const ToyDetector& student, double alpha) {
  if (teacher.parameter_count() != student.parameter_count() ||
      teacher.backbone_w.rows() != student.backbone_w.rows() ||
      teacher.cls_w.rows() != student.cls_w.rows())
    throw DomainError("ema_update: detector shapes differ");
  auto t = teacher.flatten();
  const auto s = student.flatten();
  ema_update(t, s, alpha);
  teacher.assign(t);
}

json detector_to_json(const ToyDetector& d) {
  return json{{"backbone_w", matrix_to_json(d.backbone_w)},
              {"backbone_b", vector_to_json(d.backbone_b)},
              {"cls_w", matrix_to_json(d.cls_w)},
              {"cls_b", vector_to_json(d.cls_b)},
              {"relu", d.relu}};
}

ToyDetector detector_from_json(const json& j) {
  ToyDetector d;
  d.backbone_w = matrix_from_json(j.at("backbone_w"));
  d.backbone_b = vector_from_json(j.at("backbone_b"));
  d.cls_w = matrix_from_json(j.at("cls_w"));
  d.cls_b = vector_from_json(j.at("cls_b"));
  d.relu = j.value("relu", false);
  if (d.backbone_b.size() != d.backbone_w.rows() || d.cls_w.cols() != d.backbone_w.rows() ||
      d.cls_b.size() != d.cls_w.rows() || d.cls_w.rows() < 2)
    throw ValidationError("inconsistent detector checkpoint dimensions");
  if (!d.backbone_w.allFinite() || !d.cls_w.allFinite() || !d.backbone_b.allFinite() ||
      !d.cls_b.allFinite())
    throw ValidationError("non-finite detector parameters");
  return d;
}

std::string parameter_hash(std::span<const double> params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : params) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof v);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vgsfod
