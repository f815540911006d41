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

#pragma once

#include <Eigen/Dense>
#include <vector>

#include "morphoscope/landmarks.hpp"
#include "morphoscope/tensor.hpp"

namespace morphoscope {

// Landmark-guided thin-plate-spline transform. Given correspondences
// (l_T -> l_S) the solved transform T maps target-frame points into the
// source frame; images are registered by backward warping, i.e.
// I_R(x) = I_S(T(x)) over the target grid.

/// Polyharmonic kernel: 2D U(r) = r^2 log r (U(0) = 0), 3D U(r) = r.
double tps_kernel(double r, int dim);

/// dU/dr; non-smooth at r = 0 (returned as 0 there).
double tps_kernel_derivative(double r, int dim);

/// Assembled and optionally solved TPS system.
///
/// A = [[Kmat, P], [P^T, 0]] with Kmat_ij = U(||l_T,i - l_T,j||) and
/// P row i = (1, l_T,i); B = [l_S ; 0]. W holds the K nonlinear weight
/// rows followed by the (d+1) affine rows, one column per output axis.
struct TpsModel {
  Eigen::MatrixXd A;
  Eigen::MatrixXd B;
  Eigen::MatrixXd W;
  LandmarkSet targets;  // the l_T used to build A
  int dim = 0;

  bool solved() const { return W.size() > 0; }
};

/// Relative pivot threshold below which a solve reports singularity.
inline constexpr double kSingularPivotTolerance = 1e-12;

TpsModel assemble(const LandmarkSet& l_T, const LandmarkSet& l_S);

/// Dense LU solve with partial pivoting; fills W.
void solve(TpsModel& model);

/// T(x) for a single point (1 x d in, 1 x d out).
Eigen::RowVectorXd evaluate(const TpsModel& model,
                            const Eigen::RowVectorXd& x);

/// Normalized coordinates of every node of a grid, one row per node in
/// flat row-major traversal order.
Eigen::MatrixXd grid_coordinates(const std::vector<std::size_t>& dims);

/// M x K matrix of U(||points_m - centers_k||).
Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& points,
                              const Eigen::MatrixXd& centers, int dim);

/// T applied to every row of a point list (GEMM form of evaluate()).
Eigen::MatrixXd evaluate_points(const TpsModel& model,
                                const Eigen::MatrixXd& points);

/// Backward warp of source onto an out_dims grid in the target frame.
ImageTensor warp(const TpsModel& model, const ImageTensor& source,
                 const std::vector<std::size_t>& out_dims);

/// kappa_F(A) = ||A||_F * ||A^-1||_F, computed as sqrt(sumsq(A) *
/// sumsq(A^-1)) so that identity matrices give exactly n.
double condition_frobenius(const Eigen::MatrixXd& A);

struct RegistrationLoss {
  double mse = 0.0;       // mean squared error over pixels
  double relative = 0.0;  // ||I_R - I_T||^2 / ||I_T||^2
};

RegistrationLoss registration_loss(const ImageTensor& registered,
                                   const ImageTensor& target);

}  // namespace morphoscope
