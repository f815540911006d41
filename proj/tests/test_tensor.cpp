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

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <vector>

#include <doctest.h>

#include "morphoscope/errors.hpp"
#include "morphoscope/rng.hpp"
#include "morphoscope/tensor.hpp"
#include "test_util.hpp"

using namespace morphoscope;

namespace {

ImageTensor arange_image(std::vector<std::size_t> dims) {
  ImageTensor img(std::move(dims));
  std::iota(img.data.begin(), img.data.end(), 0.0);
  return img;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double pop_std_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("grid convention maps endpoints exactly") {
  CHECK(coord_from_index(0, 64) == -1.0);
  CHECK(coord_from_index(63, 64) == 1.0);
  CHECK(coord_from_index(5, 11) == 0.0);
  CHECK(index_from_coord(-1.0, 64) == 0.0);
  CHECK(index_from_coord(1.0, 64) == 63.0);
  for (std::size_t n : {2u, 7u, 64u, 101u})
    for (std::size_t i = 0; i < n; ++i)
      CHECK(index_from_coord(coord_from_index(i, n), n) ==
            doctest::Approx(static_cast<double>(i)).epsilon(1e-14));
}

TEST_CASE("axis_tap snaps onto nodes and clamps outside") {
  const AxisTap at_node = axis_tap(coord_from_index(3, 9), 9);
  CHECK(at_node.frac == 0.0);
  CHECK(at_node.i0 == 3);

  // Snapping also catches positions a hair off a node.
  const double x = coord_from_index(3, 9) + 0.5 * kNodeSnapTolerance * 2.0 / 8.0;
  const AxisTap near_node = axis_tap(x, 9);
  CHECK(near_node.frac == 0.0);
  CHECK(near_node.i0 == 3);

  const AxisTap below = axis_tap(-2.0, 9);
  CHECK(below.i0 == 0);
  CHECK(below.frac == 0.0);
  CHECK(below.dindex_dcoord == 0.0);  // clamped: zero slope

  const AxisTap above = axis_tap(2.0, 9);
  CHECK(above.i0 + 1 == 8);
  CHECK(above.frac == 1.0);
  CHECK(above.dindex_dcoord == 0.0);

  const AxisTap inside = axis_tap(0.1234, 9);
  CHECK(inside.dindex_dcoord == doctest::Approx(4.0));  // (n-1)/2
}

TEST_CASE("tensor round trip is byte identical") {
  test_util::TempDir tmp("tensor_roundtrip");
  ImageTensor img = arange_image({2, 3});
  const auto path = tmp.path() / "t.mst";
  save_tensor(img, path);
  const ImageTensor back = load_tensor(path);
  CHECK(back.dims == img.dims);
  CHECK(back.data == img.data);

  // Bytes, not just values: save the loaded tensor again.
  const auto path2 = tmp.path() / "t2.mst";
  save_tensor(back, path2);
  CHECK(test_util::files_identical(path, path2));
}

TEST_CASE("tensor volume dims preserved in order") {
  test_util::TempDir tmp("tensor_dims");
  // Small stand-in for an anisotropic volume: distinct extents per axis.
  ImageTensor img = arange_image({5, 7, 9});
  const auto path = tmp.path() / "v.mst";
  save_tensor(img, path);
  const ImageTensor back = load_tensor(path);
  CHECK(back.dims == std::vector<std::size_t>{5, 7, 9});
  CHECK(back.data == img.data);
}

TEST_CASE("tensor format errors are distinct") {
  test_util::TempDir tmp("tensor_errors");
  const auto path = tmp.path() / "t.mst";
  save_tensor(arange_image({4, 4}), path);
  const std::string good = test_util::read_file(path);

  const auto write_bytes = [&](const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };

  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    write_bytes(bad);
    try {
      load_tensor(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.code() == FormatErrorCode::BadMagic);
    }
  }
  SUBCASE("bad version") {
    std::string bad = good;
    bad[4] = 9;
    write_bytes(bad);
    try {
      load_tensor(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.code() == FormatErrorCode::BadVersion);
    }
  }
  SUBCASE("bad dtype") {
    std::string bad = good;
    bad[5] = 7;
    write_bytes(bad);
    try {
      load_tensor(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.code() == FormatErrorCode::BadDtype);
    }
  }
  SUBCASE("bad rank") {
    std::string bad = good;
    bad[6] = 5;
    write_bytes(bad);
    try {
      load_tensor(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.code() == FormatErrorCode::BadRank);
    }
  }
  SUBCASE("truncated payload: 4x4 header with 15 values") {
    std::string bad = good;
    bad.resize(bad.size() - 8);
    write_bytes(bad);
    try {
      load_tensor(path);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      const bool size_related = e.code() == FormatErrorCode::TruncatedPayload ||
                                e.code() == FormatErrorCode::SizeMismatch;
      CHECK(size_related);
    }
  }
  SUBCASE("non-finite payload rejected") {
    ImageTensor img = arange_image({2, 2});
    img.data[1] = std::nan("");
    CHECK_THROWS_AS(save_tensor(img, path), FormatError);
  }
  SUBCASE("missing file is an io error") {
    CHECK_THROWS_AS(load_tensor(tmp.path() / "absent.mst"), IoError);
  }
}

TEST_CASE("pgm import scales by maxval") {
  test_util::TempDir tmp("pgm");
  const auto path = tmp.path() / "img.pgm";
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n2 2\n255\n";
    const unsigned char bytes[4] = {0, 255, 255, 0};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  const ImageTensor img = import_pgm(path);
  CHECK(img.dims == std::vector<std::size_t>{2, 2});
  CHECK(img.data == std::vector<double>{0.0, 1.0, 1.0, 0.0});
}

TEST_CASE("pgm 16-bit samples are big-endian and land in [0,1]") {
  test_util::TempDir tmp("pgm16");
  const auto path = tmp.path() / "img16.pgm";
  {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n2 1\n65535\n";
    // Big-endian 16-bit samples: 0x0100 = 256, 0xFFFF = 65535.
    const unsigned char bytes[4] = {0x01, 0x00, 0xFF, 0xFF};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  const ImageTensor img = import_pgm(path);
  REQUIRE(img.data.size() == 2);
  CHECK(img.data[0] == doctest::Approx(256.0 / 65535.0));
  CHECK(img.data[1] == 1.0);
}

TEST_CASE("pgm rejects ascii and zero maxval") {
  test_util::TempDir tmp("pgm_bad");
  const auto ascii = tmp.path() / "a.pgm";
  {
    std::ofstream out(ascii);
    out << "P2\n2 2\n255\n0 1 2 3\n";
  }
  try {
    import_pgm(ascii);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.code() == FormatErrorCode::UnsupportedFormat);
  }

  const auto zero = tmp.path() / "z.pgm";
  {
    std::ofstream out(zero, std::ios::binary);
    out << "P5\n2 2\n0\n";
    const unsigned char bytes[4] = {0, 0, 0, 0};
    out.write(reinterpret_cast<const char*>(bytes), 4);
  }
  CHECK_THROWS_AS(import_pgm(zero), FormatError);
}

TEST_CASE("pgm export round trip") {
  test_util::TempDir tmp("pgm_rt");
  ImageTensor img({2, 2}, {0.0, 1.0, 0.5, 2.0});  // 2.0 clamps to 1
  const auto path = tmp.path() / "x.pgm";
  export_pgm(img, path);
  const ImageTensor back = import_pgm(path);
  CHECK(back.data[0] == 0.0);
  CHECK(back.data[1] == 1.0);
  CHECK(back.data[2] == doctest::Approx(0.5).epsilon(1e-2));
  CHECK(back.data[3] == 1.0);
}

TEST_CASE("whiten yields zero mean unit std and is idempotent") {
  ImageTensor img({2, 2}, {1.0, 2.0, 3.0, 4.0});
  const ImageTensor w = whiten(img);
  CHECK(std::abs(mean_of(w.data)) < 1e-12);
  CHECK(std::abs(pop_std_of(w.data) - 1.0) < 1e-12);

  const ImageTensor w2 = whiten(w);
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(w2.data[i] == doctest::Approx(w.data[i]).epsilon(1e-12));

  const ImageTensor c = whiten(ImageTensor({2, 2}, {5.0, 5.0, 5.0, 5.0}));
  CHECK(c.data == std::vector<double>{0.0, 0.0, 0.0, 0.0});
}

TEST_CASE("gaussian noise is seeded and has the right scale") {
  ImageTensor img({100, 100});
  const ImageTensor a = add_gaussian_noise(img, 0.05, 42);
  const ImageTensor b = add_gaussian_noise(img, 0.05, 42);
  CHECK(a.data == b.data);  // bit-identical across calls

  const ImageTensor c = add_gaussian_noise(img, 0.05, 43);
  CHECK(a.data != c.data);

  const ImageTensor zero = add_gaussian_noise(img, 0.0, 42);
  CHECK(zero.data == img.data);

  CHECK(pop_std_of(a.data) == doctest::Approx(0.05).epsilon(0.10));
  CHECK(std::abs(mean_of(a.data)) < 0.005);
}

TEST_CASE("sampling is exact at nodes, linear between, clamped outside") {
  ImageTensor img({3, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8});

  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double pt[2] = {coord_from_index(i, 3), coord_from_index(j, 3)};
      CHECK(sample(img, pt) == img.data[i * 3 + j]);
    }

  const double mid[2] = {-1.0, -0.5};  // halfway between pixels 0 and 1
  CHECK(sample(img, mid) == doctest::Approx(0.5));

  const double outside[2] = {-2.0, 0.0};
  const double edge[2] = {-1.0, 0.0};
  CHECK(sample(img, outside) == sample(img, edge));

  // Interpolation stays within the bounding pixel values.
  Rng rng(7);
  for (int t = 0; t < 200; ++t) {
    const double pt[2] = {rng.next_uniform(-1.2, 1.2),
                          rng.next_uniform(-1.2, 1.2)};
    const double v = sample(img, pt);
    CHECK(v >= 0.0);
    CHECK(v <= 8.0);
  }

  const double bad[3] = {0.0, 0.0, 0.0};
  CHECK_THROWS_AS(sample(img, bad), DimensionMismatchError);
}

TEST_CASE("sample_points agrees with scalar sample") {
  ImageTensor img({4, 5});
  Rng rng(11);
  for (double& v : img.data) v = rng.next_uniform(-1.0, 1.0);
  std::vector<double> coords;
  for (int t = 0; t < 17; ++t) {
    coords.push_back(rng.next_uniform(-1.1, 1.1));
    coords.push_back(rng.next_uniform(-1.1, 1.1));
  }
  const std::vector<double> out = sample_points(img, coords, 17);
  REQUIRE(out.size() == 17);
  for (std::size_t p = 0; p < 17; ++p) {
    const double pt[2] = {coords[2 * p], coords[2 * p + 1]};
    CHECK(out[p] == sample(img, pt));
  }
}

}  // TEST_SUITE
