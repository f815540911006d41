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

#include "morphoscope/shapestats.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <sstream>

#include "morphoscope/errors.hpp"
#include "morphoscope/format.hpp"
#include "morphoscope/parallel.hpp"
#include "morphoscope/rng.hpp"

namespace morphoscope {

namespace {

constexpr double kRankTolerance = 1e-12;
constexpr double kCovarianceRegularizer = 1e-8;
constexpr std::size_t kKMeansMaxIterations = 100;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

double parse_double_field(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size())
      throw FormatError(FormatErrorCode::UnsupportedFormat,
                        context + ": bad numeric field '" + s + "'");
    return v;
  } catch (const std::exception&) {
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      context + ": bad numeric field '" + s + "'");
  }
}

// Deterministic sign convention: the entry of largest magnitude (lowest
// index on ties) is made positive.
void canonicalize_sign(Eigen::Ref<Eigen::MatrixXd> components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index c = 0; c < components.cols(); ++c) {
      const double mag = std::abs(components(r, c));
      if (mag > best) {
        best = mag;
        arg = c;
      }
    }
    if (components(r, arg) < 0.0) components.row(r) = -components.row(r);
  }
}

Eigen::MatrixXd pairwise_sq_dist(const Eigen::MatrixXd& X) {
  const Eigen::VectorXd sq = X.rowwise().squaredNorm();
  Eigen::MatrixXd d2 = sq.replicate(1, X.rows()) +
                       sq.transpose().replicate(X.rows(), 1) -
                       2.0 * (X * X.transpose());
  return d2.cwiseMax(0.0);
}

struct KMeansResult {
  std::vector<int> labels;
  Eigen::MatrixXd centers;
};

KMeansResult kmeans(const Eigen::MatrixXd& Y, std::size_t k,
                    std::uint64_t seed) {
  const Eigen::Index n = Y.rows();
  KMeansResult result;
  result.centers.resize(static_cast<Eigen::Index>(k), Y.cols());

  // Seeded farthest-point initialization.
  Rng rng(seed);
  std::vector<Eigen::Index> chosen;
  chosen.push_back(static_cast<Eigen::Index>(
      rng.next_below(static_cast<std::uint64_t>(n))));
  Eigen::VectorXd min_dist =
      (Y.rowwise() - Y.row(chosen[0])).rowwise().squaredNorm();
  while (chosen.size() < k) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (min_dist(i) > best) {
        best = min_dist(i);
        arg = i;
      }
    chosen.push_back(arg);
    min_dist = min_dist.cwiseMin(
        (Y.rowwise() - Y.row(arg)).rowwise().squaredNorm());
  }
  for (std::size_t c = 0; c < k; ++c)
    result.centers.row(static_cast<Eigen::Index>(c)) = Y.row(chosen[c]);

  result.labels.assign(static_cast<std::size_t>(n), 0);
  for (std::size_t iter = 0; iter < kKMeansMaxIterations; ++iter) {
    bool changed = false;
    // Assignment step; ties toward the lowest center index.
    for (Eigen::Index i = 0; i < n; ++i) {
      int arg = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d =
            (Y.row(i) - result.centers.row(static_cast<Eigen::Index>(c)))
                .squaredNorm();
        if (d < best) {
          best = d;
          arg = static_cast<int>(c);
        }
      }
      if (result.labels[static_cast<std::size_t>(i)] != arg) {
        result.labels[static_cast<std::size_t>(i)] = arg;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    // Update step.
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(result.centers.rows(), Y.cols());
    std::vector<std::size_t> counts(k, 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = result.labels[static_cast<std::size_t>(i)];
      sums.row(c) += Y.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        result.centers.row(static_cast<Eigen::Index>(c)) =
            sums.row(static_cast<Eigen::Index>(c)) /
            static_cast<double>(counts[c]);
      } else {
        // Re-seed an empty cluster with the point farthest from its center.
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d =
              (Y.row(i) -
               result.centers.row(result.labels[static_cast<std::size_t>(i)]))
                  .squaredNorm();
          if (d > best) {
            best = d;
            arg = i;
          }
        }
        result.centers.row(static_cast<Eigen::Index>(c)) = Y.row(arg);
        result.labels[static_cast<std::size_t>(arg)] = static_cast<int>(c);
      }
    }
  }
  return result;
}

}  // namespace

ShapeMatrix build_shape_matrix(const NetParams& params,
                               const std::vector<ImageTensor>& whitened,
                               const std::vector<std::string>& ids,
                               const std::vector<std::string>& labels,
                               const std::vector<std::size_t>& kept) {
  if (whitened.empty())
    throw InvalidArgumentError("build_shape_matrix: no images");
  if (ids.size() != whitened.size())
    throw InvalidArgumentError("build_shape_matrix: ids/images size mismatch");
  if (!labels.empty() && labels.size() != whitened.size())
    throw InvalidArgumentError(
        "build_shape_matrix: labels/images size mismatch");

  const std::size_t total = params.arch.total_landmarks();
  std::vector<std::size_t> use = kept;
  if (use.empty()) {
    use.resize(total);
    for (std::size_t j = 0; j < total; ++j) use[j] = j;
  }
  for (std::size_t j : use)
    if (j >= total)
      throw InvalidArgumentError("build_shape_matrix: kept index out of range");

  const int d = params.arch.dim();
  ShapeMatrix shapes;
  shapes.dim = d;
  shapes.ids = ids;
  shapes.labels = labels.empty()
                      ? std::vector<std::string>(whitened.size())
                      : labels;
  shapes.X.resize(static_cast<Eigen::Index>(whitened.size()),
                  static_cast<Eigen::Index>(use.size() * static_cast<std::size_t>(d)));
  parallel_for(whitened.size(), [&](std::size_t i) {
    const LandmarkSet pts = detect(params, whitened[i]);
    for (std::size_t j = 0; j < use.size(); ++j)
      for (int a = 0; a < d; ++a)
        shapes.X(static_cast<Eigen::Index>(i),
                 static_cast<Eigen::Index>(j * static_cast<std::size_t>(d) +
                                           static_cast<std::size_t>(a))) =
            pts(static_cast<Eigen::Index>(use[j]), a);
  });
  return shapes;
}

void write_shape_matrix(const ShapeMatrix& shapes,
                        const std::filesystem::path& path) {
  if (shapes.dim != 2 && shapes.dim != 3)
    throw InvalidArgumentError("write_shape_matrix: dim must be 2 or 3");
  const Eigen::Index n = shapes.X.rows();
  if (shapes.ids.size() != static_cast<std::size_t>(n) ||
      shapes.labels.size() != static_cast<std::size_t>(n))
    throw InvalidArgumentError("write_shape_matrix: id/label size mismatch");
  if (shapes.X.cols() % shapes.dim != 0)
    throw InvalidArgumentError(
        "write_shape_matrix: column count not divisible by dim");
  for (const std::string& id : shapes.ids)
    if (id.find(',') != std::string::npos || id.find('\n') != std::string::npos)
      throw InvalidArgumentError("write_shape_matrix: id contains separator");
  for (const std::string& label : shapes.labels)
    if (label.find(',') != std::string::npos ||
        label.find('\n') != std::string::npos)
      throw InvalidArgumentError("write_shape_matrix: label contains separator");

  std::ofstream out(path);
  if (!out) throw IoError("write_shape_matrix: cannot open " + path.string());
  static constexpr const char* kAxes[3] = {"x", "y", "z"};
  out << "id,label";
  const Eigen::Index landmarks = shapes.X.cols() / shapes.dim;
  for (Eigen::Index j = 0; j < landmarks; ++j)
    for (int a = 0; a < shapes.dim; ++a) out << ',' << kAxes[a] << j;
  out << '\n';
  for (Eigen::Index i = 0; i < n; ++i) {
    out << shapes.ids[static_cast<std::size_t>(i)] << ','
        << shapes.labels[static_cast<std::size_t>(i)];
    for (Eigen::Index c = 0; c < shapes.X.cols(); ++c)
      out << ',' << format_double(shapes.X(i, c));
    out << '\n';
  }
  if (!out)
    throw IoError("write_shape_matrix: write failed for " + path.string());
}

ShapeMatrix read_shape_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("read_shape_matrix: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line))
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      "read_shape_matrix: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::vector<std::string> header = split_csv_line(line);
  if (header.size() < 4 || header[0] != "id" || header[1] != "label" ||
      header[2] != "x0" || header[3] != "y0")
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      "read_shape_matrix: bad header");
  const int dim = (header.size() > 4 && header[4] == "z0") ? 3 : 2;
  const std::size_t coord_cols = header.size() - 2;
  if (coord_cols % static_cast<std::size_t>(dim) != 0)
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      "read_shape_matrix: column count not divisible by dim");

  ShapeMatrix shapes;
  shapes.dim = dim;
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw FormatError(FormatErrorCode::UnsupportedFormat,
                        "read_shape_matrix: row width mismatch");
    shapes.ids.push_back(fields[0]);
    shapes.labels.push_back(fields[1]);
    std::vector<double> row(coord_cols);
    for (std::size_t c = 0; c < coord_cols; ++c)
      row[c] = parse_double_field(fields[c + 2], "read_shape_matrix");
    rows.push_back(std::move(row));
  }
  if (rows.empty())
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      "read_shape_matrix: no data rows");
  shapes.X.resize(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(coord_cols));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t c = 0; c < coord_cols; ++c)
      shapes.X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          rows[i][c];
  return shapes;
}

PcaModel fit_pca(const Eigen::MatrixXd& X, double variance_target) {
  if (X.rows() < 2)
    throw InvalidArgumentError("fit_pca: need at least 2 samples");
  if (!(variance_target > 0.0) || variance_target > 1.0)
    throw InvalidArgumentError("fit_pca: variance_target must be in (0, 1]");

  PcaModel model;
  model.mean = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - model.mean.transpose();
  const Eigen::MatrixXd cov =
      centered.transpose() * centered / static_cast<double>(X.rows() - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success)
    throw Error("fit_pca: eigendecomposition failed");
  // Ascending order from the solver; flip to non-increasing.
  const Eigen::Index D = cov.rows();
  Eigen::VectorXd values(D);
  Eigen::MatrixXd vectors(D, D);
  for (Eigen::Index j = 0; j < D; ++j) {
    values(j) = std::max(es.eigenvalues()(D - 1 - j), 0.0);
    vectors.row(j) = es.eigenvectors().col(D - 1 - j).transpose();
  }

  const double total = values.sum();
  if (total <= 0.0) {
    // Constant data: a single zero component.
    model.components = Eigen::MatrixXd::Zero(1, D);
    model.variances = Eigen::VectorXd::Zero(1);
    model.retained = 1;
    return model;
  }

  Eigen::Index rank = 0;
  for (Eigen::Index j = 0; j < D; ++j)
    if (values(j) > kRankTolerance * values(0)) rank = j + 1;

  Eigen::Index m = 0;
  double cumulative = 0.0;
  for (Eigen::Index j = 0; j < rank; ++j) {
    cumulative += values(j);
    m = j + 1;
    if (cumulative / total >= variance_target - 1e-12) break;
  }

  model.components = vectors.topRows(m);
  canonicalize_sign(model.components);
  model.variances = values.head(m);
  model.retained = static_cast<std::size_t>(m);
  return model;
}

Eigen::MatrixXd project(const PcaModel& model, const Eigen::MatrixXd& X) {
  if (X.cols() != model.mean.size())
    throw DimensionMismatchError("project: column count mismatch");
  return (X.rowwise() - model.mean.transpose()) * model.components.transpose();
}

Eigen::MatrixXd reconstruct(const PcaModel& model,
                            const Eigen::MatrixXd& scores) {
  if (scores.cols() != model.components.rows())
    throw DimensionMismatchError("reconstruct: score width mismatch");
  return (scores * model.components).rowwise() + model.mean.transpose();
}

Eigen::MatrixXd embed_2d(const Eigen::MatrixXd& X) {
  const PcaModel model = fit_pca(X, 1.0);
  const Eigen::MatrixXd scores = project(model, X);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(X.rows(), 2);
  const Eigen::Index take = std::min<Eigen::Index>(2, scores.cols());
  out.leftCols(take) = scores.leftCols(take);
  return out;
}

ZScoreModel fit_zscore(const Eigen::MatrixXd& base, double variance_target) {
  ZScoreModel model;
  model.pca = fit_pca(base, variance_target);
  const Eigen::Index m = static_cast<Eigen::Index>(model.pca.retained);
  const double trace = model.pca.variances.sum();
  model.inv_variances.resize(m);
  if (trace <= 0.0) {
    model.inv_variances.setOnes();
    return model;
  }
  const double reg =
      kCovarianceRegularizer * trace / static_cast<double>(m);
  for (Eigen::Index j = 0; j < m; ++j)
    model.inv_variances(j) = 1.0 / (model.pca.variances(j) + reg);
  return model;
}

double zscore(const ZScoreModel& model, const Eigen::VectorXd& x) {
  if (x.size() != model.pca.mean.size())
    throw DimensionMismatchError("zscore: shape vector length mismatch");
  const Eigen::VectorXd p =
      model.pca.components * (x - model.pca.mean);
  return std::sqrt(p.array().square().matrix().dot(model.inv_variances));
}

Eigen::VectorXd zscores(const ZScoreModel& model, const Eigen::MatrixXd& X) {
  Eigen::VectorXd out(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    out(i) = zscore(model, X.row(i).transpose());
  return out;
}

ClusterModel spectral_cluster(const Eigen::MatrixXd& X, std::size_t k,
                              std::uint64_t seed) {
  const Eigen::Index n = X.rows();
  if (k < 2) throw InvalidArgumentError("spectral_cluster: k must be >= 2");
  if (static_cast<Eigen::Index>(k) > n)
    throw InvalidArgumentError("spectral_cluster: k exceeds sample count");

  // Gaussian affinity with the median pairwise distance as bandwidth.
  const Eigen::MatrixXd d2 = pairwise_sq_dist(X);
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(n) * (static_cast<std::size_t>(n) - 1) / 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      dists.push_back(std::sqrt(d2(i, j)));
  std::sort(dists.begin(), dists.end());
  double sigma = 1.0;
  if (!dists.empty()) {
    const std::size_t half = dists.size() / 2;
    sigma = (dists.size() % 2 == 1)
                ? dists[half]
                : 0.5 * (dists[half - 1] + dists[half]);
  }
  if (!(sigma > 0.0)) sigma = 1.0;  // all points coincide

  Eigen::MatrixXd affinity =
      (-d2.array() / (2.0 * sigma * sigma)).exp().matrix();
  affinity.diagonal().setZero();

  // Symmetric normalized Laplacian.
  Eigen::VectorXd degree = affinity.rowwise().sum();
  Eigen::VectorXd inv_sqrt(n);
  for (Eigen::Index i = 0; i < n; ++i)
    inv_sqrt(i) = degree(i) > 0.0 ? 1.0 / std::sqrt(degree(i)) : 0.0;
  Eigen::MatrixXd laplacian =
      Eigen::MatrixXd::Identity(n, n) -
      (inv_sqrt.asDiagonal() * affinity * inv_sqrt.asDiagonal());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(laplacian);
  if (es.info() != Eigen::Success)
    throw Error("spectral_cluster: eigendecomposition failed");

  // k smallest-eigenvalue eigenvectors, sign-canonicalized, row-normalized.
  ClusterModel model;
  model.k = k;
  model.training = X;
  model.embedding = es.eigenvectors().leftCols(static_cast<Eigen::Index>(k));
  for (Eigen::Index c = 0; c < model.embedding.cols(); ++c) {
    Eigen::Index arg = 0;
    model.embedding.col(c).cwiseAbs().maxCoeff(&arg);
    if (model.embedding(arg, c) < 0.0)
      model.embedding.col(c) = -model.embedding.col(c);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double norm = model.embedding.row(i).norm();
    if (norm > 0.0) model.embedding.row(i) /= norm;
  }

  model.labels = kmeans(model.embedding, k, seed).labels;
  return model;
}

int assign_cluster(const ClusterModel& model, const Eigen::VectorXd& x) {
  if (x.size() != model.training.cols())
    throw DimensionMismatchError("assign_cluster: dimension mismatch");
  Eigen::Index arg = 0;
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < model.training.rows(); ++i) {
    const double d = (model.training.row(i) - x.transpose()).squaredNorm();
    if (d < best) {
      best = d;
      arg = i;
    }
  }
  return model.labels[static_cast<std::size_t>(arg)];
}

std::vector<int> assign_clusters(const ClusterModel& model,
                                 const Eigen::MatrixXd& X) {
  std::vector<int> out(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    out[static_cast<std::size_t>(i)] = assign_cluster(model, X.row(i).transpose());
  return out;
}

}  // namespace morphoscope
