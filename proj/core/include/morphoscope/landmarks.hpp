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
#include <filesystem>

namespace morphoscope {

/// K x d matrix of normalized landmark coordinates. Row k of a source set
/// corresponds to row k of the matching target set; ordering is meaningful.
using LandmarkSet = Eigen::MatrixXd;

/// Throws unless all coordinates are finite and d is 2 or 3.
void validate_landmarks(const LandmarkSet& points);

/// Text format: one header line "K d", then K lines of d space-separated
/// decimals. Round-trips doubles exactly (shortest exact decimal form).
LandmarkSet load_landmarks(const std::filesystem::path& path);
void save_landmarks(const LandmarkSet& points,
                    const std::filesystem::path& path);

/// The 2^d corner points of the normalized domain, lexicographic order
/// (all -1 first). Used as fixed anchor landmarks.
LandmarkSet corner_landmarks(int dim);

}  // namespace morphoscope
