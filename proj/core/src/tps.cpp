/*
 * Copyright 2026 Morphoscope Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "morphoscope/tps.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "morphoscope/errors.hpp"

namespace morphoscope {

double tps_kernel(double r, int dim) {
  if (dim == 2) {
    if (r == 0.0) return 0.0;
    return r * r * std::log(r);
  }
  return r;
}

double tps_kernel_derivative(double r, int dim) {
  if (dim == 2) {
    if (r == 0.0) return 0.0;
    return r * (2.0 * std::log(r) + 1.0);
  }
  return 1.0;
}

TpsModel assemble(const LandmarkSet& l_T, const LandmarkSet& l_S) {
  validate_landmarks(l_T);
  validate_landmarks(l_S);
  if (l_T.rows() != l_S.rows() || l_T.cols() != l_S.cols())
    throw DimensionMismatchError(
        "assemble: source and target landmark sets must agree in K and d");
  const Eigen::Index k = l_T.rows();
  const int d = static_cast<int>(l_T.cols());
  if (k < d + 1)
    throw InvalidArgumentError("assemble: need at least d+1 landmarks, got " +
                               std::to_string(k));

  const Eigen::Index n = k + d + 1;
  TpsModel model;
  model.dim = d;
  model.targets = l_T;
  model.A = Eigen::MatrixXd::Zero(n, n);
  model.B = Eigen::MatrixXd::Zero(n, d);

  for (Eigen::Index i = 0; i < k; ++i) {
    for (Eigen::Index j = i + 1; j < k; ++j) {
      const double r = (l_T.row(i) - l_T.row(j)).norm();
      const double u = tps_kernel(r, d);
      model.A(i, j) = u;
      model.A(j, i) = u;  // symmetric by construction
    }
  }
  for (Eigen::Index i = 0; i < k; ++i) {
    model.A(i, k) = 1.0;
    model.A(k, i) = 1.0;
    for (int a = 0; a < d; ++a) {
      model.A(i, k + 1 + a) = l_T(i, a);
      model.A(k + 1 + a, i) = l_T(i, a);
    }
  }
  model.B.topRows(k) = l_S;
  return model;
}

void solve(TpsModel& model) {
  if (model.A.size() == 0)
    throw InvalidArgumentError("solve: model has no assembled system");
  const double max_abs = model.A.cwiseAbs().maxCoeff();
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(model.A);
  const double min_pivot = lu.matrixLU().diagonal().cwiseAbs().minCoeff();
  if (!(min_pivot > kSingularPivotTolerance * max_abs))
    throw SingularSystemError(
        "solve: TPS system is singular or numerically singular (pivot " +
        std::to_string(min_pivot) + ")");
  model.W = lu.solve(model.B);
}

Eigen::RowVectorXd evaluate(const TpsModel& model,
                            const Eigen::RowVectorXd& x) {
  if (!model.solved())
    throw InvalidArgumentError("evaluate: model weights are not solved");
  if (x.cols() != model.dim)
    throw DimensionMismatchError("evaluate: point dimension mismatch");
  const Eigen::Index k = model.targets.rows();
  const int d = model.dim;

  Eigen::RowVectorXd out = model.W.row(k);  // constant affine term
  out.noalias() += x * model.W.bottomRows(d);
  for (Eigen::Index i = 0; i < k; ++i) {
    const double r = (x - model.targets.row(i)).norm();
    out.noalias() += tps_kernel(r, d) * model.W.row(i);
  }
  return out;
}

Eigen::MatrixXd grid_coordinates(const std::vector<std::size_t>& dims) {
  const std::size_t d = dims.size();
  const std::size_t count = ImageTensor::element_count(dims);
  Eigen::MatrixXd coords(count, d);
  std::vector<std::size_t> index(d, 0);
  for (std::size_t m = 0; m < count; ++m) {
    for (std::size_t a = 0; a < d; ++a)
      coords(m, a) = coord_from_index(index[a], dims[a]);
    for (std::size_t a = d; a-- > 0;) {
      if (++index[a] < dims[a]) break;
      index[a] = 0;
    }
  }
  return coords;
}

Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& points,
                              const Eigen::MatrixXd& centers, int dim) {
  if (points.cols() != centers.cols())
    throw DimensionMismatchError("kernel_matrix: dimension mismatch");
  Eigen::MatrixXd u(points.rows(), centers.rows());
  for (Eigen::Index m = 0; m < points.rows(); ++m)
    for (Eigen::Index i = 0; i < centers.rows(); ++i)
      u(m, i) = tps_kernel((points.row(m) - centers.row(i)).norm(), dim);
  return u;
}

Eigen::MatrixXd evaluate_points(const TpsModel& model,
                                const Eigen::MatrixXd& points) {
  if (!model.solved())
    throw InvalidArgumentError("evaluate_points: model weights not solved");
  if (points.cols() != model.dim)
    throw DimensionMismatchError("evaluate_points: point dimension mismatch");
  const Eigen::Index k = model.targets.rows();
  const int d = model.dim;

  Eigen::MatrixXd out = points * model.W.bottomRows(d);
  out.rowwise() += model.W.row(k);
  out.noalias() +=
      kernel_matrix(points, model.targets, d) * model.W.topRows(k);
  return out;
}

ImageTensor warp(const TpsModel& model, const ImageTensor& source,
                 const std::vector<std::size_t>& out_dims) {
  if (static_cast<int>(source.ndim()) != model.dim ||
      static_cast<int>(out_dims.size()) != model.dim)
    throw DimensionMismatchError("warp: image rank does not match transform");
  const Eigen::MatrixXd coords =
      evaluate_points(model, grid_coordinates(out_dims));
  ImageTensor out(out_dims);
  const std::size_t d = out_dims.size();
  std::vector<double> point(d);
  for (std::size_t m = 0; m < out.size(); ++m) {
    for (std::size_t a = 0; a < d; ++a) point[a] = coords(m, a);
    out.data[m] = sample(source, point);
  }
  return out;
}

double condition_frobenius(const Eigen::MatrixXd& a) {
  if (a.rows() != a.cols())
    throw DimensionMismatchError("condition_frobenius: matrix must be square");
  const double max_abs = a.cwiseAbs().maxCoeff();
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  const double min_pivot = lu.matrixLU().diagonal().cwiseAbs().minCoeff();
  if (!(min_pivot > kSingularPivotTolerance * max_abs))
    throw SingularSystemError("condition_frobenius: singular matrix");
  const Eigen::MatrixXd inv = lu.inverse();
  return std::sqrt(a.squaredNorm() * inv.squaredNorm());
}

RegistrationLoss registration_loss(const ImageTensor& registered,
                                   const ImageTensor& target) {
  if (registered.dims != target.dims)
    throw DimensionMismatchError("registration_loss: image dims mismatch");
  double num = 0.0;
  double denom = 0.0;
  for (std::size_t i = 0; i < registered.size(); ++i) {
    const double diff = registered.data[i] - target.data[i];
    num += diff * diff;
    denom += target.data[i] * target.data[i];
  }
  RegistrationLoss loss;
  loss.mse = num / static_cast<double>(registered.size());
  if (denom > 0.0)
    loss.relative = num / denom;
  else
    loss.relative =
        num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return loss;
}

}  // namespace morphoscope
