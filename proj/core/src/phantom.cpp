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

#include "morphoscope/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "morphoscope/errors.hpp"
#include "morphoscope/rng.hpp"
#include "morphoscope/tps.hpp"

namespace morphoscope {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

std::string indexed_name(const char* prefix, std::size_t i,
                         const char* suffix) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%04zu%s", prefix, i, suffix);
  return buf;
}

// Endpoints of the major (b) axis: center +/- b * (-sin phi, cos phi).
void append_major_axis_endpoints(const PhantomEllipse& e, LandmarkSet& out,
                                 Eigen::Index row) {
  const double phi = e.phi_deg * kDegToRad;
  const double ex = -std::sin(phi) * e.b;
  const double ey = std::cos(phi) * e.b;
  // classic (x, y) mapped to image (u, v) = (-y, x)
  out(row, 0) = -(e.y0 + ey);
  out(row, 1) = e.x0 + ex;
  out(row + 1, 0) = -(e.y0 - ey);
  out(row + 1, 1) = e.x0 - ex;
}

std::vector<double> blob_semi_axes(std::size_t d, double radius,
                                   double squash) {
  std::vector<double> semi(d, radius);
  semi[0] = radius * squash;
  return semi;
}

}  // namespace

const std::vector<PhantomEllipse>& head_phantom_ellipses() {
  // Toft (1996), the high-contrast variant of the ten-ellipse head phantom.
  static const std::vector<PhantomEllipse> kEllipses = {
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
      {-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0},
      {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0},
      {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0},
      {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},
      {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
      {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},
      {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
      {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},
      {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
  };
  return kEllipses;
}

namespace {

// Spatial half-width of the soft edge band around every ellipse boundary,
// in normalized units (~1 pixel at 64x64). The continuous field is kept C1
// on purpose: a hard indicator aliases under bilinear resampling, leaving a
// mismatch concentrated along every boundary that no warp can remove and
// thus a double-digit floor on pairwise registration error at desk
// resolutions, regardless of landmark quality.
constexpr double kEdgeHalfWidth = 0.03;

// Membership factor of one ellipse: 1 strictly inside, 0 strictly outside,
// cubic smoothstep ramp across the +-kEdgeHalfWidth band. The normalized
// radius sqrt(q) is converted to an approximate signed spatial offset via
// the geometric-mean semi-axis.
double ellipse_membership(double q, double a, double b) {
  const double scale = std::sqrt(a * b);
  const double offset = (1.0 - std::sqrt(q)) * scale;  // >0 inside
  const double t = 0.5 + offset / (2.0 * kEdgeHalfWidth);
  if (t <= 0.0) return 0.0;
  if (t >= 1.0) return 1.0;
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

ImageTensor rasterize_phantom(const std::vector<std::size_t>& dims) {
  if (dims.size() != 2 || dims[0] != dims[1])
    throw DimensionMismatchError("rasterize_phantom: square rank-2 grid "
                                 "required");
  if (dims[0] < 32)
    throw InvalidArgumentError("rasterize_phantom: grid extent must be >= 32");
  const std::vector<PhantomEllipse>& ellipses = head_phantom_ellipses();

  ImageTensor img(dims);
  std::size_t flat = 0;
  for (std::size_t i = 0; i < dims[0]; ++i) {
    const double u = coord_from_index(i, dims[0]);
    const double y = -u;
    for (std::size_t j = 0; j < dims[1]; ++j, ++flat) {
      const double x = coord_from_index(j, dims[1]);
      double sum = 0.0;
      for (const PhantomEllipse& e : ellipses) {
        const double phi = e.phi_deg * kDegToRad;
        const double dx = x - e.x0;
        const double dy = y - e.y0;
        const double xr = dx * std::cos(phi) + dy * std::sin(phi);
        const double yr = -dx * std::sin(phi) + dy * std::cos(phi);
        const double q = (xr / e.a) * (xr / e.a) + (yr / e.b) * (yr / e.b);
        sum += e.intensity * ellipse_membership(q, e.a, e.b);
      }
      img.data[flat] = sum > 0.0 ? sum : 0.0;
    }
  }
  return img;
}

LandmarkSet phantom_control_points() {
  const std::vector<PhantomEllipse>& ellipses = head_phantom_ellipses();
  LandmarkSet points(6, 2);
  append_major_axis_endpoints(ellipses[0], points, 0);  // outer skull
  append_major_axis_endpoints(ellipses[2], points, 2);  // right ventricle
  append_major_axis_endpoints(ellipses[3], points, 4);  // left ventricle
  return points;
}

ImageTensor make_blob_volume(const std::vector<std::size_t>& dims,
                             const std::vector<double>& center, double radius,
                             double squash, double sharpness) {
  const std::size_t d = dims.size();
  if (d != 2 && d != 3)
    throw DimensionMismatchError("make_blob_volume: rank must be 2 or 3");
  if (center.size() != d)
    throw DimensionMismatchError(
        "make_blob_volume: center rank does not match grid rank");
  for (std::size_t n : dims)
    if (n < 2)
      throw InvalidArgumentError("make_blob_volume: grid extent must be >= 2");
  if (!(radius > 0.0) || !(squash > 0.0) || !(sharpness > 0.0))
    throw InvalidArgumentError(
        "make_blob_volume: radius, squash, sharpness must be positive");
  const std::vector<double> semi = blob_semi_axes(d, radius, squash);
  for (std::size_t a = 0; a < d; ++a)
    if (std::abs(center[a]) + semi[a] > 1.0)
      throw InvalidArgumentError(
          "make_blob_volume: blob does not fit inside the volume");

  const Eigen::MatrixXd coords = grid_coordinates(dims);
  const double t0 = std::tanh(sharpness);
  ImageTensor img(dims);
  for (Eigen::Index m = 0; m < coords.rows(); ++m) {
    double rho_sq = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
      const double rel =
          (coords(m, static_cast<Eigen::Index>(a)) - center[a]) / semi[a];
      rho_sq += rel * rel;
    }
    const double t = std::tanh(sharpness * (1.0 - std::sqrt(rho_sq)));
    img.data[static_cast<std::size_t>(m)] = t > 0.0 ? t / t0 : 0.0;
  }
  return img;
}

LandmarkSet blob_boundary_points(const std::vector<double>& center,
                                 double radius, double squash, int dim) {
  if (dim != 2 && dim != 3)
    throw InvalidArgumentError("blob_boundary_points: dim must be 2 or 3");
  if (center.size() != static_cast<std::size_t>(dim))
    throw DimensionMismatchError("blob_boundary_points: center rank mismatch");
  if (!(radius > 0.0) || !(squash > 0.0))
    throw InvalidArgumentError(
        "blob_boundary_points: radius and squash must be positive");
  const std::vector<double> semi =
      blob_semi_axes(static_cast<std::size_t>(dim), radius, squash);
  LandmarkSet points(2 * dim, dim);
  for (int a = 0; a < dim; ++a) {
    for (int b = 0; b < dim; ++b) {
      points(2 * a, b) = center[b];
      points(2 * a + 1, b) = center[b];
    }
    points(2 * a, a) += semi[a];
    points(2 * a + 1, a) -= semi[a];
  }
  return points;
}

Dataset make_dataset(const DatasetSpec& spec,
                     const std::filesystem::path& dir) {
  const std::size_t d = spec.dims.size();
  if (d != 2 && d != 3)
    throw DimensionMismatchError("make_dataset: rank must be 2 or 3");
  if (spec.count == 0)
    throw InvalidArgumentError("make_dataset: need at least one image");
  if (!(spec.sigma >= 0.0))
    throw InvalidArgumentError("make_dataset: sigma must be >= 0");
  if (!(spec.clamp > 0.0) || spec.clamp > 1.0)
    throw InvalidArgumentError("make_dataset: clamp must be in (0, 1]");

  Dataset set;
  set.dims = spec.dims;
  set.sigma = spec.sigma;
  set.seed = spec.seed;
  ImageTensor base;  // own the base image: pushing into set.images reallocates
  if (d == 2) {
    base = rasterize_phantom(spec.dims);
    set.base_points = phantom_control_points();
  } else {
    const std::vector<double> origin(3, 0.0);
    base = make_blob_volume(spec.dims, origin, spec.blob_radius, 1.0,
                            spec.blob_sharpness);
    set.base_points = blob_boundary_points(origin, spec.blob_radius, 1.0, 3);
  }
  set.images.reserve(spec.count);
  set.images.push_back(base);
  set.gt_points.push_back(set.base_points);
  const Eigen::Index k = set.base_points.rows();
  // Image corners ride along as identity correspondences so the boundary
  // stays pinned under every generated warp.
  const LandmarkSet corners = corner_landmarks(static_cast<int>(d));
  LandmarkSet sources(k + corners.rows(), static_cast<Eigen::Index>(d));
  sources.topRows(k) = set.base_points;
  sources.bottomRows(corners.rows()) = corners;

  Rng rng(derive_seed(spec.seed, {0x01}));
  for (std::size_t i = 1; i < spec.count; ++i) {
    LandmarkSet perturbed(k, static_cast<Eigen::Index>(d));
    for (Eigen::Index p = 0; p < k; ++p) {
      // Resample this point's offset until it stays inside the clamp box.
      for (int attempt = 0;; ++attempt) {
        if (attempt >= 10000)
          throw InvalidArgumentError(
              "make_dataset: cannot place control point inside clamp box; "
              "sigma too large for the configured clamp");
        bool inside = true;
        for (std::size_t a = 0; a < d; ++a) {
          const double c = set.base_points(p, static_cast<Eigen::Index>(a)) +
                           spec.sigma * rng.next_gaussian();
          perturbed(p, static_cast<Eigen::Index>(a)) = c;
          if (std::abs(c) > spec.clamp) inside = false;
        }
        if (inside) break;
      }
    }
    LandmarkSet targets(k + corners.rows(), static_cast<Eigen::Index>(d));
    targets.topRows(k) = perturbed;
    targets.bottomRows(corners.rows()) = corners;
    // Backward warping: interpolation nodes are the displaced points, so
    // the base feature at base_points lands at `perturbed` in the output.
    TpsModel model = assemble(targets, sources);
    solve(model);
    set.images.push_back(warp(model, base, spec.dims));
    set.gt_points.push_back(perturbed);
  }

  std::filesystem::create_directories(dir);
  save_landmarks(set.base_points, dir / "base_landmarks.txt");
  nlohmann::json manifest;
  manifest["dims"] = spec.dims;
  manifest["count"] = spec.count;
  manifest["sigma"] = spec.sigma;
  manifest["clamp"] = spec.clamp;
  manifest["seed"] = spec.seed;
  manifest["base_landmarks"] = "base_landmarks.txt";
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::string img_name = indexed_name("img_", i, ".mst");
    const std::string gt_name = indexed_name("gt_", i, ".txt");
    save_tensor(set.images[i], dir / img_name);
    save_landmarks(set.gt_points[i], dir / gt_name);
    entries.push_back({{"image", img_name}, {"landmarks", gt_name}});
  }
  manifest["entries"] = std::move(entries);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("make_dataset: cannot write manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("make_dataset: manifest write failed");
  return set;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in)
    throw IoError("load_dataset: cannot open " +
                  (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      std::string("load_dataset: bad manifest: ") + e.what());
  }

  Dataset set;
  try {
    set.dims = manifest.at("dims").get<std::vector<std::size_t>>();
    set.sigma = manifest.at("sigma").get<double>();
    set.seed = manifest.at("seed").get<std::uint64_t>();
    set.base_points =
        load_landmarks(dir / manifest.at("base_landmarks").get<std::string>());
    for (const nlohmann::json& entry : manifest.at("entries")) {
      set.images.push_back(
          load_tensor(dir / entry.at("image").get<std::string>()));
      set.gt_points.push_back(
          load_landmarks(dir / entry.at("landmarks").get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      std::string("load_dataset: bad manifest: ") + e.what());
  }
  if (set.images.empty())
    throw FormatError(FormatErrorCode::BadDims, "load_dataset: empty cohort");
  for (const ImageTensor& img : set.images)
    if (img.dims != set.dims)
      throw FormatError(FormatErrorCode::SizeMismatch,
                        "load_dataset: image shape disagrees with manifest");
  return set;
}

std::vector<LandmarkSet> make_ring_cohort(std::size_t count,
                                          std::size_t landmarks, double a,
                                          double b, double noise,
                                          std::uint64_t seed) {
  if (count == 0 || landmarks < 3)
    throw InvalidArgumentError(
        "make_ring_cohort: need count >= 1 and landmarks >= 3");
  if (!(a > 0.0) || !(b > 0.0) || !(noise >= 0.0))
    throw InvalidArgumentError("make_ring_cohort: bad shape parameters");

  Rng rng(derive_seed(seed, {0x06}));
  std::vector<LandmarkSet> shapes;
  shapes.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    LandmarkSet shape(static_cast<Eigen::Index>(landmarks), 2);
    for (std::size_t p = 0; p < landmarks; ++p) {
      const double theta = 2.0 * std::numbers::pi * static_cast<double>(p) /
                           static_cast<double>(landmarks);
      shape(static_cast<Eigen::Index>(p), 0) =
          a * std::cos(theta) + noise * rng.next_gaussian();
      shape(static_cast<Eigen::Index>(p), 1) =
          b * std::sin(theta) + noise * rng.next_gaussian();
    }
    shapes.push_back(std::move(shape));
  }
  return shapes;
}

TwoClassSet make_two_class_set(std::size_t per_class,
                               const std::vector<std::size_t>& dims,
                               double radius, double aspect0, double aspect1,
                               double jitter, std::uint64_t seed) {
  if (per_class == 0)
    throw InvalidArgumentError("make_two_class_set: per_class must be >= 1");
  if (!(jitter >= 0.0))
    throw InvalidArgumentError("make_two_class_set: jitter must be >= 0");
  const std::size_t d = dims.size();
  const std::vector<double> origin(d, 0.0);
  const double aspects[2] = {aspect0, aspect1};

  TwoClassSet set;
  Rng rng(derive_seed(seed, {0x07}));
  for (int label = 0; label < 2; ++label) {
    for (std::size_t s = 0; s < per_class; ++s) {
      // Resample until the squashed blob fits in the volume.
      double q;
      for (int attempt = 0;; ++attempt) {
        if (attempt >= 10000)
          throw InvalidArgumentError(
              "make_two_class_set: aspect jitter incompatible with radius");
        q = aspects[label] + jitter * rng.next_gaussian();
        if (q > 0.0 && radius * q <= 1.0 && radius <= 1.0) break;
      }
      set.images.push_back(make_blob_volume(dims, origin, radius, q));
      set.boundary_points.push_back(
          blob_boundary_points(origin, radius, q, static_cast<int>(d)));
      set.labels.push_back(label);
    }
  }
  return set;
}

}  // namespace morphoscope
