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

#ifndef MORPHOSCOPE_SHAPESTATS_HPP_
#define MORPHOSCOPE_SHAPESTATS_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "morphoscope/network.hpp"
#include "morphoscope/tensor.hpp"

namespace morphoscope {

// Statistical shape analysis on detected landmark sets: PCA embeddings,
// Mahalanobis Z-scores against a base cohort, and spectral clustering.

// --- Shape matrices ---------------------------------------------------------

// One shape per row, flattened landmark-major then axis:
// (x0, y0[, z0], x1, y1[, z1], ...).
struct ShapeMatrix {
  Eigen::MatrixXd X;                // n x (K*d)
  std::vector<std::string> ids;     // length n
  std::vector<std::string> labels;  // length n; entries may be empty
  int dim = 0;                      // coordinate rank d (2 or 3)
};

// Detects landmarks on every image and flattens the kept subset (empty
// `kept` keeps all landmarks) into shape rows. `labels` may be empty,
// meaning unlabeled.
ShapeMatrix build_shape_matrix(const NetParams& params,
                               const std::vector<ImageTensor>& whitened,
                               const std::vector<std::string>& ids,
                               const std::vector<std::string>& labels = {},
                               const std::vector<std::size_t>& kept = {});

// CSV with header "id,label,x0,y0[,z0],x1,...".
void write_shape_matrix(const ShapeMatrix& shapes,
                        const std::filesystem::path& path);
ShapeMatrix read_shape_matrix(const std::filesystem::path& path);

// --- PCA --------------------------------------------------------------------

struct PcaModel {
  Eigen::VectorXd mean;        // length D
  Eigen::MatrixXd components;  // m x D, orthonormal rows
  Eigen::VectorXd variances;   // length m, non-increasing
  std::size_t retained = 0;    // m
};

// Fits a PCA model retaining the smallest component count whose cumulative
// explained variance reaches variance_target (in (0, 1]). Component signs
// follow a deterministic convention (largest-magnitude entry positive).
// Zero-variance input yields a single zero component.
PcaModel fit_pca(const Eigen::MatrixXd& X, double variance_target);

// Rows of X projected into component space (n x m).
Eigen::MatrixXd project(const PcaModel& model, const Eigen::MatrixXd& X);

// Inverse of project(): scores (n x m) back to data space (n x D).
Eigen::MatrixXd reconstruct(const PcaModel& model,
                            const Eigen::MatrixXd& scores);

// Projection of every row onto the first two principal components of X
// itself (second column zero when the data are collinear).
Eigen::MatrixXd embed_2d(const Eigen::MatrixXd& X);

// --- Mahalanobis Z-scores ---------------------------------------------------

struct ZScoreModel {
  PcaModel pca;
  Eigen::VectorXd inv_variances;  // length m: inverse regularized variances
};

// Fits PCA on the base cohort, then models the cohort in component space
// with its (diagonal) covariance, regularized by +1e-8 * trace/m on the
// diagonal. A base cohort with zero variance degrades to unit covariance.
ZScoreModel fit_zscore(const Eigen::MatrixXd& base, double variance_target);

// Mahalanobis distance of one shape vector from the base distribution.
double zscore(const ZScoreModel& model, const Eigen::VectorXd& x);

// zscore() for every row.
Eigen::VectorXd zscores(const ZScoreModel& model, const Eigen::MatrixXd& X);

// --- Spectral clustering ----------------------------------------------------

struct ClusterModel {
  Eigen::MatrixXd training;    // the fitted rows (input space)
  std::vector<int> labels;     // length n, values in [0, k)
  Eigen::MatrixXd embedding;   // n x k row-normalized spectral embedding
  std::size_t k = 0;
};

// Normalized spectral clustering: Gaussian affinity with sigma = median
// pairwise distance (zero diagonal), symmetric normalized Laplacian, the k
// eigenvectors of smallest eigenvalue row-normalized, then k-means with
// deterministic seeded farthest-point initialization (at most 100
// iterations, ties broken toward the lowest index).
ClusterModel spectral_cluster(const Eigen::MatrixXd& X, std::size_t k,
                              std::uint64_t seed = 0);

// Out-of-sample labels: each query inherits the label of its nearest
// training row in input space (ties toward the lowest index).
int assign_cluster(const ClusterModel& model, const Eigen::VectorXd& x);
std::vector<int> assign_clusters(const ClusterModel& model,
                                 const Eigen::MatrixXd& X);

}  // namespace morphoscope

#endif  // MORPHOSCOPE_SHAPESTATS_HPP_
