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

#include "morphoscope/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "morphoscope/rng.hpp"

namespace morphoscope {

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'N'};
constexpr std::uint8_t kFormatVersion = 1;
constexpr std::uint8_t kDtypeFloat64 = 1;

void put_u32le(std::ofstream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t get_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) |
         (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f64le(std::ofstream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i)
    bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double get_f64le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

std::size_t ImageTensor::element_count(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

double coord_from_index(std::size_t i, std::size_t n) {
  return 2.0 * static_cast<double>(i) / static_cast<double>(n - 1) - 1.0;
}

double index_from_coord(double x, std::size_t n) {
  return (x + 1.0) * 0.5 * static_cast<double>(n - 1);
}

AxisTap axis_tap(double coord, std::size_t n) {
  if (n < 2)
    throw InvalidArgumentError("axis_tap: sampling needs axis size >= 2");
  const double span = static_cast<double>(n - 1);
  const double f_raw = index_from_coord(coord, n);
  double f = f_raw;
  double slope = 0.5 * span;
  if (f_raw < 0.0) {
    f = 0.0;
    slope = 0.0;
  } else if (f_raw > span) {
    f = span;
    slope = 0.0;
  }
  std::size_t i0 = static_cast<std::size_t>(f);
  if (i0 >= n - 1) i0 = n - 2;
  double frac = f - static_cast<double>(i0);
  if (frac < kNodeSnapTolerance) {
    frac = 0.0;
  } else if (frac > 1.0 - kNodeSnapTolerance) {
    // Snap onto the upper node; step into the next cell where one exists so
    // gradients stay right-continuous at interior nodes.
    if (i0 + 1 <= n - 2) {
      i0 += 1;
      frac = 0.0;
    } else {
      frac = 1.0;
    }
  }
  return AxisTap{i0, frac, slope};
}

void save_tensor(const ImageTensor& img, const std::filesystem::path& path) {
  if (img.dims.empty() || img.dims.size() > 4)
    throw InvalidArgumentError("save_tensor: ndim must be in 1..4");
  for (std::size_t d : img.dims)
    if (d == 0) throw InvalidArgumentError("save_tensor: zero-size dimension");
  if (ImageTensor::element_count(img.dims) != img.data.size())
    throw InvalidArgumentError(
        "save_tensor: dims/payload size mismatch in tensor to write");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_tensor: cannot open " + path.string());
  out.write(kMagic, 4);
  const unsigned char head[4] = {kFormatVersion, kDtypeFloat64,
                                 static_cast<unsigned char>(img.dims.size()),
                                 0};
  out.write(reinterpret_cast<const char*>(head), 4);
  for (std::size_t d : img.dims) put_u32le(out, static_cast<std::uint32_t>(d));
  for (double v : img.data) put_f64le(out, v);
  if (!out) throw IoError("save_tensor: write failed for " + path.string());
}

ImageTensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("load_tensor: cannot open " + path.string());
  const std::streamsize file_size = in.tellg();
  in.seekg(0);

  unsigned char header[8];
  if (file_size < 8 || !in.read(reinterpret_cast<char*>(header), 8))
    throw FormatError(FormatErrorCode::TruncatedPayload,
                      "load_tensor: file shorter than header: " +
                          path.string());
  if (std::memcmp(header, kMagic, 4) != 0)
    throw FormatError(FormatErrorCode::BadMagic,
                      "load_tensor: bad magic bytes in " + path.string());
  if (header[4] != kFormatVersion)
    throw FormatError(FormatErrorCode::BadVersion,
                      "load_tensor: unsupported format version " +
                          std::to_string(header[4]));
  if (header[5] != kDtypeFloat64)
    throw FormatError(FormatErrorCode::BadDtype,
                      "load_tensor: dtype mismatch, expected float64 LE");
  const std::size_t ndim = header[6];
  if (ndim < 1 || ndim > 4)
    throw FormatError(FormatErrorCode::BadRank,
                      "load_tensor: ndim " + std::to_string(ndim) +
                          " outside 1..4");
  if (header[7] != 0)
    throw FormatError(FormatErrorCode::BadVersion,
                      "load_tensor: reserved header byte must be zero");

  std::vector<unsigned char> dim_bytes(4 * ndim);
  if (file_size < static_cast<std::streamsize>(8 + dim_bytes.size()) ||
      !in.read(reinterpret_cast<char*>(dim_bytes.data()), dim_bytes.size()))
    throw FormatError(FormatErrorCode::TruncatedPayload,
                      "load_tensor: file ends inside dims header");
  std::vector<std::size_t> dims(ndim);
  for (std::size_t k = 0; k < ndim; ++k) {
    dims[k] = get_u32le(dim_bytes.data() + 4 * k);
    if (dims[k] == 0)
      throw FormatError(FormatErrorCode::BadDims,
                        "load_tensor: zero-size dimension in header");
  }

  const std::size_t count = ImageTensor::element_count(dims);
  const std::streamsize payload_bytes =
      file_size - static_cast<std::streamsize>(8 + 4 * ndim);
  if (payload_bytes % 8 != 0)
    throw FormatError(FormatErrorCode::TruncatedPayload,
                      "load_tensor: payload truncated mid-element");
  if (payload_bytes / 8 != static_cast<std::streamsize>(count))
    throw FormatError(
        FormatErrorCode::SizeMismatch,
        "load_tensor: header declares " + std::to_string(count) +
            " elements but payload holds " + std::to_string(payload_bytes / 8));

  std::vector<unsigned char> raw(count * 8);
  if (!in.read(reinterpret_cast<char*>(raw.data()), raw.size()))
    throw FormatError(FormatErrorCode::TruncatedPayload,
                      "load_tensor: payload read failed");
  std::vector<double> data(count);
  for (std::size_t k = 0; k < count; ++k)
    data[k] = get_f64le(raw.data() + 8 * k);
  for (double v : data)
    if (!std::isfinite(v))
      throw FormatError(FormatErrorCode::NonFiniteData,
                        "load_tensor: non-finite value in payload");
  return ImageTensor{std::move(dims), std::move(data)};
}

namespace {

// Skips PGM whitespace and '#' comment lines.
int pgm_next_token(std::istream& in, std::string& token) {
  token.clear();
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    token.push_back(static_cast<char>(c));
    c = in.get();
  }
  return c;
}

}  // namespace

ImageTensor import_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("import_pgm: cannot open " + path.string());

  std::string tok;
  pgm_next_token(in, tok);
  if (tok != "P5")
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      "import_pgm: expected binary PGM (P5), got '" + tok +
                          "' in " + path.string());

  auto read_number = [&](const char* what) -> long {
    pgm_next_token(in, tok);
    if (tok.empty() ||
        tok.find_first_not_of("0123456789") != std::string::npos)
      throw FormatError(FormatErrorCode::BadDims,
                        std::string("import_pgm: malformed ") + what);
    return std::stol(tok);
  };
  const long width = read_number("width");
  const long height = read_number("height");
  const long maxval = read_number("maxval");
  if (width <= 0 || height <= 0)
    throw FormatError(FormatErrorCode::BadDims,
                      "import_pgm: non-positive image dimensions");
  if (maxval <= 0 || maxval > 65535)
    throw FormatError(FormatErrorCode::BadMaxval,
                      "import_pgm: maxval " + std::to_string(maxval) +
                          " outside 1..65535");

  const std::size_t count = static_cast<std::size_t>(width) *
                            static_cast<std::size_t>(height);
  const int bytes_per_sample = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raster(count * bytes_per_sample);
  if (!in.read(reinterpret_cast<char*>(raster.data()), raster.size()))
    throw FormatError(FormatErrorCode::TruncatedPayload,
                      "import_pgm: truncated raster in " + path.string());

  std::vector<double> data(count);
  const double scale = 1.0 / static_cast<double>(maxval);
  if (bytes_per_sample == 1) {
    for (std::size_t k = 0; k < count; ++k)
      data[k] = static_cast<double>(raster[k]) * scale;
  } else {
    // Two-byte samples are big-endian per the PGM specification.
    for (std::size_t k = 0; k < count; ++k) {
      const unsigned v = (static_cast<unsigned>(raster[2 * k]) << 8) |
                         static_cast<unsigned>(raster[2 * k + 1]);
      data[k] = static_cast<double>(v) * scale;
    }
  }
  return ImageTensor{{static_cast<std::size_t>(height),
                      static_cast<std::size_t>(width)},
                     std::move(data)};
}

void export_pgm(const ImageTensor& img, const std::filesystem::path& path) {
  if (img.ndim() != 2)
    throw DimensionMismatchError("export_pgm: tensor must be 2D");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("export_pgm: cannot open " + path.string());
  out << "P5\n" << img.dims[1] << " " << img.dims[0] << "\n255\n";
  std::vector<unsigned char> raster(img.size());
  for (std::size_t k = 0; k < img.size(); ++k) {
    const double v = std::clamp(img.data[k], 0.0, 1.0);
    raster[k] = static_cast<unsigned char>(std::lround(v * 255.0));
  }
  out.write(reinterpret_cast<const char*>(raster.data()), raster.size());
  if (!out) throw IoError("export_pgm: write failed for " + path.string());
}

ImageTensor whiten(const ImageTensor& img) {
  if (img.size() < 2)
    throw InvalidArgumentError("whiten: image needs at least 2 elements");
  double mean = 0.0;
  for (double v : img.data) mean += v;
  mean /= static_cast<double>(img.size());
  double var = 0.0;
  double max_abs = 0.0;
  for (double v : img.data) {
    const double d = v - mean;
    var += d * d;
    max_abs = std::max(max_abs, std::abs(v));
  }
  var /= static_cast<double>(img.size());
  const double sd = std::sqrt(var);

  ImageTensor out(img.dims);
  // Treat images whose spread is at rounding-noise level as constant.
  if (sd <= 1e-14 * std::max(1.0, max_abs)) {
    return out;
  }
  const double inv = 1.0 / sd;
  for (std::size_t k = 0; k < img.size(); ++k)
    out.data[k] = (img.data[k] - mean) * inv;
  return out;
}

ImageTensor add_gaussian_noise(const ImageTensor& img, double sigma,
                               std::uint64_t seed) {
  if (sigma < 0.0)
    throw InvalidArgumentError("add_gaussian_noise: sigma must be >= 0");
  if (sigma == 0.0) return img;
  ImageTensor out(img.dims);
  Rng rng(seed);
  for (std::size_t k = 0; k < img.size(); ++k)
    out.data[k] = img.data[k] + sigma * rng.next_gaussian();
  return out;
}

double sample(const ImageTensor& img, std::span<const double> point) {
  const std::size_t d = img.ndim();
  if (point.size() != d)
    throw DimensionMismatchError(
        "sample: point dimension " + std::to_string(point.size()) +
        " does not match tensor rank " + std::to_string(d));

  AxisTap taps[4];
  std::size_t stride[4];
  std::size_t s = 1;
  for (std::size_t a = d; a-- > 0;) {
    stride[a] = s;
    s *= img.dims[a];
    taps[a] = axis_tap(point[a], img.dims[a]);
  }

  // Accumulate over the 2^d cell corners.
  double value = 0.0;
  const std::size_t corners = std::size_t{1} << d;
  for (std::size_t mask = 0; mask < corners; ++mask) {
    double w = 1.0;
    std::size_t offset = 0;
    for (std::size_t a = 0; a < d; ++a) {
      const bool hi = (mask >> a) & 1u;
      w *= hi ? taps[a].frac : 1.0 - taps[a].frac;
      offset += (taps[a].i0 + (hi ? 1 : 0)) * stride[a];
    }
    value += w * img.data[offset];
  }
  return value;
}

std::vector<double> sample_points(const ImageTensor& img,
                                  std::span<const double> coords,
                                  std::size_t point_count) {
  const std::size_t d = img.ndim();
  if (coords.size() != point_count * d)
    throw DimensionMismatchError("sample_points: coordinate buffer size");
  std::vector<double> out(point_count);
  for (std::size_t k = 0; k < point_count; ++k)
    out[k] = sample(img, coords.subspan(k * d, d));
  return out;
}

}  // namespace morphoscope
