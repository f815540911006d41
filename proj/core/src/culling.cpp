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

#include "morphoscope/culling.hpp"

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <limits>

#include "morphoscope/errors.hpp"
#include "morphoscope/format.hpp"
#include "morphoscope/parallel.hpp"
#include "morphoscope/rng.hpp"
#include "morphoscope/tps.hpp"

namespace morphoscope {

namespace {

using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double grid_match_loss(const ImageTensor& source,
                       const Eigen::VectorXd& target_flat,
                       const RowMatrixXd& coords) {
  const std::size_t n = static_cast<std::size_t>(coords.rows());
  const std::vector<double> sampled = sample_points(
      source, std::span<const double>(coords.data(), coords.size()), n);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double diff = sampled[i] - target_flat(static_cast<Eigen::Index>(i));
    sum += diff * diff;
  }
  return sum / static_cast<double>(n);
}

LandmarkSet drop_row(const LandmarkSet& pts, Eigen::Index k) {
  LandmarkSet out(pts.rows() - 1, pts.cols());
  out.topRows(k) = pts.topRows(k);
  out.bottomRows(pts.rows() - 1 - k) = pts.bottomRows(pts.rows() - 1 - k);
  return out;
}

}  // namespace

PairList make_scoring_pairs(std::size_t image_count, std::size_t cap,
                            std::uint64_t seed) {
  if (image_count < 2)
    throw InvalidArgumentError("make_scoring_pairs: need at least 2 images");
  if (cap == 0) throw InvalidArgumentError("make_scoring_pairs: cap must be >= 1");
  const std::size_t all = image_count * (image_count - 1);
  PairList pairs;
  if (all <= cap) {
    pairs.reserve(all);
    for (std::size_t a = 0; a < image_count; ++a)
      for (std::size_t b = 0; b < image_count; ++b)
        if (a != b) pairs.emplace_back(a, b);
    return pairs;
  }
  Rng rng(seed);
  pairs.reserve(cap);
  for (std::size_t s = 0; s < cap; ++s) {
    const std::size_t a = static_cast<std::size_t>(rng.next_below(image_count));
    std::size_t b = static_cast<std::size_t>(rng.next_below(image_count - 1));
    if (b >= a) ++b;
    pairs.emplace_back(a, b);
  }
  return pairs;
}

RedundancyReport score_landmarks(const NetParams& params,
                                 const std::vector<ImageTensor>& whitened,
                                 const PairList& pairs) {
  if (whitened.size() < 2)
    throw InvalidArgumentError("score_landmarks: need at least 2 images");
  if (pairs.empty())
    throw InvalidArgumentError("score_landmarks: empty pair list");
  for (const auto& [a, b] : pairs)
    if (a >= whitened.size() || b >= whitened.size() || a == b)
      throw InvalidArgumentError("score_landmarks: bad pair index");

  const ArchSpec& arch = params.arch;
  const Eigen::Index total = static_cast<Eigen::Index>(arch.total_landmarks());
  const int d = arch.dim();
  if (total < d + 2)
    throw InvalidArgumentError(
        "score_landmarks: need at least d+2 landmarks so that removing one "
        "leaves a solvable system");
  for (const ImageTensor& img : whitened)
    if (img.dims != arch.input_dims)
      throw DimensionMismatchError(
          "score_landmarks: image shape does not match architecture");

  // One detection and one flattening per referenced image.
  std::vector<char> used(whitened.size(), 0);
  for (const auto& [a, b] : pairs) used[a] = used[b] = 1;
  std::vector<LandmarkSet> detected(whitened.size());
  std::vector<Eigen::VectorXd> flat(whitened.size());
  parallel_for(whitened.size(), [&](std::size_t i) {
    if (!used[i]) return;
    detected[i] = detect(params, whitened[i]);
    flat[i] = Eigen::Map<const Eigen::VectorXd>(
        whitened[i].data.data(),
        static_cast<Eigen::Index>(whitened[i].data.size()));
  });

  const Eigen::MatrixXd grid = grid_coordinates(arch.input_dims);

  struct PairScore {
    Eigen::VectorXd delta;      // per-landmark loss increase
    std::vector<char> sampled;  // 1 where the reduced system solved
    bool ok = false;
    std::size_t excluded = 0;
  };
  std::vector<PairScore> scores(pairs.size());

  parallel_for(pairs.size(), [&](std::size_t p) {
    const auto [src, tgt] = pairs[p];
    const LandmarkSet& l_S = detected[src];
    const LandmarkSet& l_T = detected[tgt];
    PairScore& score = scores[p];

    TpsModel full = assemble(l_T, l_S);
    try {
      solve(full);
    } catch (const SingularSystemError&) {
      return;  // pair contributes nothing
    }

    // The grid kernel matrix is the expensive part; build it once against
    // all landmarks and drop one column per leave-one-out solve.
    const Eigen::MatrixXd kmat = kernel_matrix(grid, l_T, d);
    RowMatrixXd coords(grid.rows(), d);

    coords.noalias() = kmat * full.W.topRows(total);
    coords.noalias() += grid * full.W.bottomRows(d);
    coords.rowwise() += full.W.row(total);
    const double base_loss =
        grid_match_loss(whitened[src], flat[tgt], coords);

    score.delta = Eigen::VectorXd::Zero(total);
    score.sampled.assign(static_cast<std::size_t>(total), 0);
    for (Eigen::Index k = 0; k < total; ++k) {
      TpsModel reduced = assemble(drop_row(l_T, k), drop_row(l_S, k));
      try {
        solve(reduced);
      } catch (const SingularSystemError&) {
        ++score.excluded;
        continue;
      }
      const Eigen::Index kept = total - 1;
      coords.setZero();
      if (k > 0)
        coords.noalias() += kmat.leftCols(k) * reduced.W.topRows(k);
      if (k < total - 1)
        coords.noalias() +=
            kmat.rightCols(total - 1 - k) * reduced.W.middleRows(k, kept - k);
      coords.noalias() += grid * reduced.W.bottomRows(d);
      coords.rowwise() += reduced.W.row(kept);
      const double loss = grid_match_loss(whitened[src], flat[tgt], coords);
      score.delta(k) = loss - base_loss;
      score.sampled[static_cast<std::size_t>(k)] = 1;
    }
    score.ok = true;
  });

  // Fixed-order reduction for thread-count-independent results.
  RedundancyReport report;
  report.importance = Eigen::VectorXd::Zero(total);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(total);
  for (const PairScore& score : scores) {
    if (!score.ok) continue;
    ++report.pairs_used;
    report.excluded += score.excluded;
    for (Eigen::Index k = 0; k < total; ++k) {
      if (!score.sampled[static_cast<std::size_t>(k)]) continue;
      report.importance(k) += score.delta(k);
      counts(k) += 1.0;
    }
  }
  if (report.pairs_used == 0)
    throw SingularSystemError(
        "score_landmarks: no pair produced a solvable system");
  for (Eigen::Index k = 0; k < total; ++k)
    if (counts(k) > 0.0) report.importance(k) /= counts(k);
  return report;
}

double default_cull_threshold(const RedundancyReport& report) {
  if (report.importance.size() == 0)
    throw InvalidArgumentError("default_cull_threshold: empty report");
  return 0.05 * report.importance.maxCoeff();
}

std::vector<std::size_t> cull(RedundancyReport& report, double threshold,
                              const std::vector<std::size_t>& pinned) {
  const std::size_t total = static_cast<std::size_t>(report.importance.size());
  if (total == 0) throw InvalidArgumentError("cull: empty report");
  for (std::size_t k : pinned)
    if (k >= total)
      throw InvalidArgumentError("cull: pinned index out of range");

  report.kept_mask.assign(total, false);
  for (std::size_t k = 0; k < total; ++k)
    if (report.importance(static_cast<Eigen::Index>(k)) >= threshold)
      report.kept_mask[k] = true;
  for (std::size_t k : pinned) report.kept_mask[k] = true;

  std::vector<std::size_t> kept;
  for (std::size_t k = 0; k < total; ++k)
    if (report.kept_mask[k]) kept.push_back(k);
  if (kept.empty())
    throw InvalidArgumentError(
        "cull: threshold would remove every landmark; lower it or pin some");
  return kept;
}

void write_redundancy_csv(const RedundancyReport& report,
                          const std::filesystem::path& path) {
  const std::size_t total = static_cast<std::size_t>(report.importance.size());
  if (!report.kept_mask.empty() && report.kept_mask.size() != total)
    throw InvalidArgumentError("write_redundancy_csv: mask/importance mismatch");
  std::ofstream out(path);
  if (!out)
    throw IoError("write_redundancy_csv: cannot open " + path.string());
  out << "landmark_index,importance,kept\n";
  for (std::size_t k = 0; k < total; ++k) {
    const bool kept = report.kept_mask.empty() || report.kept_mask[k];
    out << k << ','
        << format_double(report.importance(static_cast<Eigen::Index>(k)))
        << ',' << (kept ? 1 : 0) << '\n';
  }
  if (!out)
    throw IoError("write_redundancy_csv: write failed for " + path.string());
}

}  // namespace morphoscope
