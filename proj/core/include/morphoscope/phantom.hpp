// Copyright 2026 The Morphoscope Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MORPHOSCOPE_PHANTOM_HPP_
#define MORPHOSCOPE_PHANTOM_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "morphoscope/landmarks.hpp"
#include "morphoscope/tensor.hpp"

namespace morphoscope {

// One ellipse of the head phantom, classic (x right, y up) convention:
// additive intensity, semi-axes along the rotated frame, center, rotation.
struct PhantomEllipse {
  double intensity;
  double a;
  double b;
  double x0;
  double y0;
  double phi_deg;
};

// The ten-ellipse head phantom with the high-contrast ("modified") tissue
// intensities of Toft (1996). Summed intensities are clipped at zero.
const std::vector<PhantomEllipse>& head_phantom_ellipses();

// Point-samples the phantom at pixel centers of a square rank-2 grid (extent
// >= 32). Image axis 0 (rows, coordinate u) runs along -y and axis 1
// (columns, v) along +x, so the head is upright when row 0 is displayed on
// top.
ImageTensor rasterize_phantom(const std::vector<std::size_t>& dims);

// Major-axis endpoints of the outer skull, the right and the left ventricle
// ellipses, in image (u, v) coordinates: six well-separated points on
// strong intensity edges.
LandmarkSet phantom_control_points();

// Ellipsoidal blob with a tanh edge profile, rank 2 or 3:
//   value = max(0, tanh(s*(1-rho))) / tanh(s)
// where rho is the elliptical distance of the voxel coordinate from
// `center` with semi-axes radius*squash along axis 0 and radius elsewhere.
// squash = 1 gives a sphere. The blob must fit inside the normalized cube.
ImageTensor make_blob_volume(const std::vector<std::size_t>& dims,
                             const std::vector<double>& center, double radius,
                             double squash, double sharpness = 6.0);

// The 2*d axis extremes of the blob surface, one landmark per face, ordered
// axis 0 +/-, axis 1 +/-, ...
LandmarkSet blob_boundary_points(const std::vector<double>& center,
                                 double radius, double squash, int dim);

// --- Warped-cohort dataset ---------------------------------------------------

struct DatasetSpec {
  std::vector<std::size_t> dims = {64, 64};
  std::size_t count = 100;
  double sigma = 0.05;  // control-point perturbation scale
  double clamp = 0.98;  // perturbed points are resampled until inside
  double blob_radius = 0.6;      // rank-3 base image only
  double blob_sharpness = 6.0;   // rank-3 base image only
  std::uint64_t seed = 0;
};

// On-disk cohort: per-image tensor plus its ground-truth control-point
// locations, indexed by manifest.json.
struct Dataset {
  std::vector<std::size_t> dims;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  LandmarkSet base_points;
  std::vector<ImageTensor> images;
  std::vector<LandmarkSet> gt_points;
};

// Entry 0 is the unwarped base image; each later entry displaces the base
// control points by i.i.d. gaussians (rejection-resampled into the clamp
// box) and warps the base image with a spline through those points plus the
// image corners held in place. Rank 2 writes the head phantom, rank 3 the
// blob volume. Returns the generated cohort.
Dataset make_dataset(const DatasetSpec& spec,
                     const std::filesystem::path& dir);

Dataset load_dataset(const std::filesystem::path& dir);

// --- Stats-test shape generators ----------------------------------------------

// Shapes drawn as K points on an axis-aligned ellipse at equal angular
// spacing, plus i.i.d. gaussian noise on every coordinate. Used as seeded
// cohorts for the statistics tests.
std::vector<LandmarkSet> make_ring_cohort(std::size_t count,
                                          std::size_t landmarks, double a,
                                          double b, double noise,
                                          std::uint64_t seed);

// Blob images whose aspect ratio (squash) is drawn bimodally: class 0
// around aspect0, class 1 around aspect1, each with gaussian jitter. The
// exact per-image boundary landmarks are carried alongside.
struct TwoClassSet {
  std::vector<ImageTensor> images;
  std::vector<LandmarkSet> boundary_points;
  std::vector<int> labels;
};

TwoClassSet make_two_class_set(std::size_t per_class,
                               const std::vector<std::size_t>& dims,
                               double radius, double aspect0, double aspect1,
                               double jitter, std::uint64_t seed);

}  // namespace morphoscope

#endif  // MORPHOSCOPE_PHANTOM_HPP_
