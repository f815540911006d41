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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "morphoscope/errors.hpp"

namespace morphoscope {

/// Dense d-dimensional intensity grid, 64-bit floats, row-major.
/// dims are ordered slowest- to fastest-varying.
struct ImageTensor {
  std::vector<std::size_t> dims;
  std::vector<double> data;

  ImageTensor() = default;
  explicit ImageTensor(std::vector<std::size_t> d)
      : dims(std::move(d)), data(element_count(dims), 0.0) {}
  ImageTensor(std::vector<std::size_t> d, std::vector<double> values)
      : dims(std::move(d)), data(std::move(values)) {}

  std::size_t ndim() const { return dims.size(); }
  std::size_t size() const { return data.size(); }

  static std::size_t element_count(const std::vector<std::size_t>& dims);
};

// --- Grid convention ---------------------------------------------------
//
// Pixel index i along an axis of size n maps to the normalized coordinate
// x = 2*i/(n-1) - 1, so index 0 sits exactly at -1 and index n-1 exactly
// at +1. Coordinate component j of a point always addresses axis j of the
// tensor (axis 0 = slowest varying).

double coord_from_index(std::size_t i, std::size_t n);
double index_from_coord(double x, std::size_t n);

/// One axis of a multilinear sampling stencil: base index, fractional
/// offset into the cell, and the derivative of the continuous index with
/// respect to the normalized coordinate (zero where the coordinate is
/// clamped outside the grid).
struct AxisTap {
  std::size_t i0;
  double frac;
  double dindex_dcoord;
};

/// Fractional offsets within this distance of a cell node are snapped onto
/// the node so that sampling at (transformed) grid positions reproduces
/// stored pixels bit-exactly. Well inside the non-smooth margin that
/// gradient checks exclude.
inline constexpr double kNodeSnapTolerance = 1e-9;

AxisTap axis_tap(double coord, std::size_t n);

// --- I/O ----------------------------------------------------------------
//
// Binary tensor format (bit-exact):
//   magic "MSTN" | version u8 = 1 | dtype u8 = 1 (float64 LE) |
//   ndim u8 in {1,2,3,4} | reserved u8 = 0 | ndim x u32 LE dims |
//   product(dims) x float64 LE payload.

ImageTensor load_tensor(const std::filesystem::path& path);
void save_tensor(const ImageTensor& img, const std::filesystem::path& path);

/// Binary PGM (P5), maxval <= 65535; intensities scaled to [0,1].
ImageTensor import_pgm(const std::filesystem::path& path);

/// Writes a 2D tensor as binary PGM, clamping values to [0,1], maxval 255.
void export_pgm(const ImageTensor& img, const std::filesystem::path& path);

// --- Intensity transforms ------------------------------------------------

/// Zero mean, unit population standard deviation. Constant images map to
/// all zeros.
ImageTensor whiten(const ImageTensor& img);

/// out = in + N(0, sigma^2) i.i.d. per element, deterministic per seed.
ImageTensor add_gaussian_noise(const ImageTensor& img, double sigma,
                               std::uint64_t seed);

// --- Sampling -------------------------------------------------------------

/// Multilinear interpolation at a normalized-coordinate point under the
/// grid convention above. Out-of-bounds coordinates clamp to the border.
double sample(const ImageTensor& img, std::span<const double> point);

/// Samples a list of points (row-major K x d coordinate buffer).
std::vector<double> sample_points(const ImageTensor& img,
                                  std::span<const double> coords,
                                  std::size_t point_count);

}  // namespace morphoscope
