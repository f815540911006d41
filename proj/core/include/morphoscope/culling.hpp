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

#ifndef MORPHOSCOPE_CULLING_HPP_
#define MORPHOSCOPE_CULLING_HPP_

#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "morphoscope/network.hpp"
#include "morphoscope/tensor.hpp"
#include "morphoscope/training.hpp"

namespace morphoscope {

// Post-training leave-one-out redundancy scoring. For each registration
// pair p and landmark k the score sample is
//   delta_{p,k} = L_match(all landmarks except k) - L_match(all landmarks),
// and importance_k is the mean of delta_{p,k} over the pair set. High
// scores mark landmarks whose removal hurts registration; scores near (or
// below) zero mark redundant ones. Scoring runs forward solves only and
// never touches the parameters.

struct RedundancyReport {
  Eigen::VectorXd importance;   // length K, mean loss increase per landmark
  std::size_t pairs_used = 0;   // pairs whose full system solved
  std::size_t excluded = 0;     // (pair, landmark) samples dropped because
                                // the reduced system was unsolvable
  std::vector<bool> kept_mask;  // filled by cull(); empty means "all kept"
};

inline constexpr std::size_t kDefaultScoringPairCap = 2000;

// All ordered pairs (i != j) over [0, image_count); when there are more
// than `cap` of them, `cap` uniformly random ordered pairs instead.
PairList make_scoring_pairs(std::size_t image_count, std::size_t cap,
                            std::uint64_t seed);

// Scores every landmark (anchors included) over the given pairs. Images
// must be whitened with the same normalization used for detection during
// training. Requires at least d+2 total landmarks so that removal leaves
// a solvable system.
RedundancyReport score_landmarks(const NetParams& params,
                                 const std::vector<ImageTensor>& whitened,
                                 const PairList& pairs);

// Default threshold: 5% of the maximum importance score.
double default_cull_threshold(const RedundancyReport& report);

// Keeps landmark k iff importance_k >= threshold or k is pinned; updates
// report.kept_mask and returns the sorted kept index list. Refuses to
// empty the landmark set.
std::vector<std::size_t> cull(RedundancyReport& report, double threshold,
                              const std::vector<std::size_t>& pinned = {});

// CSV report, columns: landmark_index,importance,kept.
void write_redundancy_csv(const RedundancyReport& report,
                          const std::filesystem::path& path);

}  // namespace morphoscope

#endif  // MORPHOSCOPE_CULLING_HPP_
