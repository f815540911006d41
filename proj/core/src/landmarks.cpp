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

#include "morphoscope/landmarks.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "morphoscope/errors.hpp"

namespace morphoscope {

void validate_landmarks(const LandmarkSet& points) {
  if (points.cols() != 2 && points.cols() != 3)
    throw DimensionMismatchError("landmarks: dimension must be 2 or 3, got " +
                                 std::to_string(points.cols()));
  if (!points.allFinite())
    throw InvalidArgumentError("landmarks: non-finite coordinate");
}

LandmarkSet load_landmarks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("load_landmarks: cannot open " + path.string());
  long k = 0, d = 0;
  if (!(in >> k >> d) || k < 0 || d < 1)
    throw FormatError(FormatErrorCode::BadDims,
                      "load_landmarks: malformed header in " + path.string());
  LandmarkSet points(k, d);
  for (long i = 0; i < k; ++i)
    for (long j = 0; j < d; ++j)
      if (!(in >> points(i, j)))
        throw FormatError(FormatErrorCode::TruncatedPayload,
                          "load_landmarks: expected " + std::to_string(k * d) +
                              " coordinates in " + path.string());
  return points;
}

void save_landmarks(const LandmarkSet& points,
                    const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("save_landmarks: cannot open " + path.string());
  out << points.rows() << " " << points.cols() << "\n";
  char buf[64];
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    for (Eigen::Index j = 0; j < points.cols(); ++j) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, points(i, j));
      out.write(buf, end - buf);
      out.put(j + 1 < points.cols() ? ' ' : '\n');
    }
  }
  if (!out) throw IoError("save_landmarks: write failed for " + path.string());
}

LandmarkSet corner_landmarks(int dim) {
  if (dim != 2 && dim != 3)
    throw InvalidArgumentError("corner_landmarks: dimension must be 2 or 3");
  const int count = 1 << dim;
  LandmarkSet corners(count, dim);
  for (int c = 0; c < count; ++c)
    for (int a = 0; a < dim; ++a)
      corners(c, a) = ((c >> (dim - 1 - a)) & 1) ? 1.0 : -1.0;
  return corners;
}

}  // namespace morphoscope
