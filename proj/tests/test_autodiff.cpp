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
#include <cstddef>
#include <vector>

#include <doctest.h>

#include "fd_check.hpp"
#include "morphoscope/autodiff.hpp"
#include "morphoscope/errors.hpp"
#include "morphoscope/landmarks.hpp"
#include "morphoscope/rng.hpp"
#include "morphoscope/tensor.hpp"
#include "morphoscope/tps.hpp"

using namespace morphoscope;
using test_util::fd_check;
using test_util::FdReport;
using test_util::TapeBuild;

namespace {

Eigen::VectorXd random_vector(Eigen::Index n, Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.next_uniform(lo, hi);
  return v;
}

/// Leaf holding a segment of theta under the given shape (row-major).
ad::NodeId segment_leaf(ad::Tape& tape, const Eigen::VectorXd& theta,
                        Eigen::Index& at, std::vector<std::size_t> dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  ad::NodeId id = tape.leaf(ad::Value(
      std::move(dims), theta.segment(at, static_cast<Eigen::Index>(n))));
  at += static_cast<Eigen::Index>(n);
  return id;
}

/// Smooth band-limited test image; safe for finite differences through
/// multilinear resampling because cell-to-cell slope changes are tiny.
ImageTensor smooth_image(std::size_t rows, std::size_t cols, double phase) {
  ImageTensor img({rows, cols});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double u = coord_from_index(i, rows);
      const double v = coord_from_index(j, cols);
      img.data[i * cols + j] = 0.6 + 0.25 * std::sin(1.9 * u + phase) +
                               0.2 * std::cos(1.3 * v - 0.4 * phase) +
                               0.1 * u * v;
    }
  return img;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("backward basics: seed, accumulation, determinism, scalar root") {
  ad::Tape tape;
  const ad::NodeId x = tape.leaf(ad::Value::scalar(3.0));
  tape.backward(x);
  REQUIRE(tape.grad(x).size() == 1);
  CHECK(tape.grad(x)[0] == 1.0);

  // Two uses of the same leaf accumulate.
  const ad::NodeId twice = tape.add(x, x);
  tape.backward(twice);
  CHECK(tape.grad(x)[0] == 2.0);

  // Repeated sweeps reset and reproduce bit-identically.
  tape.backward(twice);
  CHECK(tape.grad(x)[0] == 2.0);

  Rng rng(1);
  const ad::NodeId vec =
      tape.leaf(ad::Value::from_vector(random_vector(4, rng)));
  CHECK_THROWS_AS(tape.backward(vec), InvalidArgumentError);
}

TEST_CASE("conv forward closed forms") {
  ad::Tape tape;
  Rng rng(41);
  const ad::NodeId input =
      tape.leaf(ad::Value({1, 4, 4}, random_vector(16, rng)));

  SUBCASE("identity kernel reproduces the input") {
    Eigen::VectorXd k = Eigen::VectorXd::Zero(9);
    k(4) = 1.0;  // center tap
    const ad::NodeId kernel = tape.constant(ad::Value({1, 1, 3, 3}, k));
    const ad::NodeId bias =
        tape.constant(ad::Value({1}, Eigen::VectorXd::Zero(1)));
    const ad::NodeId out = tape.conv(input, kernel, bias, 1);
    CHECK(tape.value(out).dims == std::vector<std::size_t>{1, 4, 4});
    CHECK(tape.value(out).data == tape.value(input).data);
  }

  SUBCASE("all-ones kernel sums 3x3 neighborhoods") {
    const ad::NodeId constant_img =
        tape.constant(ad::Value({1, 5, 5}, Eigen::VectorXd::Constant(25, 0.5)));
    const ad::NodeId kernel =
        tape.constant(ad::Value({1, 1, 3, 3}, Eigen::VectorXd::Ones(9)));
    const ad::NodeId bias =
        tape.constant(ad::Value({1}, Eigen::VectorXd::Zero(1)));
    const ad::NodeId out = tape.conv(constant_img, kernel, bias, 1);
    const Eigen::VectorXd& o = tape.value(out).data;
    for (int i = 1; i <= 3; ++i)
      for (int j = 1; j <= 3; ++j)
        CHECK(o(i * 5 + j) == doctest::Approx(4.5).epsilon(1e-15));
    // Corner sees only a 2x2 patch through the zero padding.
    CHECK(o(0) == doctest::Approx(2.0).epsilon(1e-15));
  }

  SUBCASE("3d identity kernel") {
    Rng r3(42);
    const ad::NodeId vol =
        tape.leaf(ad::Value({1, 3, 3, 3}, random_vector(27, r3)));
    Eigen::VectorXd k = Eigen::VectorXd::Zero(27);
    k(13) = 1.0;  // center of the 3x3x3 cube
    const ad::NodeId kernel = tape.constant(ad::Value({1, 1, 3, 3, 3}, k));
    const ad::NodeId bias =
        tape.constant(ad::Value({1}, Eigen::VectorXd::Zero(1)));
    const ad::NodeId out = tape.conv(vol, kernel, bias, 1);
    CHECK(tape.value(out).data == tape.value(vol).data);
  }

  SUBCASE("stride 2 output extents are ceil(n/2)") {
    Rng r4(43);
    const ad::NodeId img =
        tape.leaf(ad::Value({1, 5, 4}, random_vector(20, r4)));
    const ad::NodeId kernel =
        tape.constant(ad::Value({2, 1, 3, 3}, random_vector(18, r4)));
    const ad::NodeId bias = tape.constant(ad::Value({2}, random_vector(2, r4)));
    const ad::NodeId out = tape.conv(img, kernel, bias, 2);
    CHECK(tape.value(out).dims == std::vector<std::size_t>{2, 3, 2});
  }

  SUBCASE("shape errors") {
    const ad::NodeId kernel =
        tape.constant(ad::Value({1, 2, 3, 3}, random_vector(18, rng)));
    const ad::NodeId bias =
        tape.constant(ad::Value({1}, Eigen::VectorXd::Zero(1)));
    CHECK_THROWS_AS(tape.conv(input, kernel, bias, 1),
                    DimensionMismatchError);  // channel mismatch
    const ad::NodeId ok_kernel =
        tape.constant(ad::Value({1, 1, 3, 3}, random_vector(9, rng)));
    CHECK_THROWS_AS(tape.conv(input, ok_kernel, bias, 3),
                    InvalidArgumentError);  // bad stride
  }
}

TEST_CASE("dense forward closed forms") {
  ad::Tape tape;
  Rng rng(44);
  const Eigen::VectorXd xv = random_vector(4, rng);
  const ad::NodeId x = tape.leaf(ad::Value::from_vector(xv));

  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(4, 4);
  const ad::NodeId w_eye = tape.constant(ad::Value::from_matrix(eye));
  const ad::NodeId b0 =
      tape.constant(ad::Value({4}, Eigen::VectorXd::Zero(4)));
  CHECK(tape.value(tape.dense(x, w_eye, b0)).data == xv);

  const Eigen::VectorXd bv = random_vector(3, rng);
  const ad::NodeId w0 =
      tape.constant(ad::Value({3, 4}, Eigen::VectorXd::Zero(12)));
  const ad::NodeId b = tape.constant(ad::Value::from_vector(bv));
  CHECK(tape.value(tape.dense(x, w0, b)).data == bv);

  const ad::NodeId w_bad =
      tape.constant(ad::Value({3, 5}, Eigen::VectorXd::Zero(15)));
  CHECK_THROWS_AS(tape.dense(x, w_bad, b), DimensionMismatchError);
}

TEST_CASE("activation forward values") {
  ad::Tape tape;
  Eigen::VectorXd v(3);
  v << -1.0, 0.0, 2.0;
  const ad::NodeId x = tape.leaf(ad::Value::from_vector(v));
  const Eigen::VectorXd& r = tape.value(tape.relu(x)).data;
  CHECK(r(0) == 0.0);
  CHECK(r(1) == 0.0);
  CHECK(r(2) == 2.0);

  Eigen::VectorXd w(3);
  w << -5.0, 0.0, 5.0;
  const ad::NodeId y = tape.leaf(ad::Value::from_vector(w));
  const Eigen::VectorXd& t = tape.value(tape.tanh_op(y)).data;
  CHECK(t(1) == 0.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(t(i) > -1.0);
    CHECK(t(i) < 1.0);  // strictly inside
  }
}

TEST_CASE("conv gradients match finite differences") {
  Rng rng(45);
  const auto conv_program = [](std::vector<std::size_t> in_dims,
                               std::vector<std::size_t> k_dims, int stride) {
    return [in_dims, k_dims, stride](ad::Tape& tape,
                                     const Eigen::VectorXd& theta) {
      Eigen::Index at = 0;
      TapeBuild b;
      const ad::NodeId input = segment_leaf(tape, theta, at, in_dims);
      const ad::NodeId kernel = segment_leaf(tape, theta, at, k_dims);
      const ad::NodeId bias = segment_leaf(tape, theta, at, {k_dims[0]});
      b.root = tape.sum_squares(tape.conv(input, kernel, bias, stride));
      b.leaves = {input, kernel, bias};
      return b;
    };
  };

  SUBCASE("2d stride 1") {
    const Eigen::VectorXd theta = random_vector(2 * 5 * 5 + 3 * 2 * 9 + 3, rng);
    const FdReport r = fd_check(conv_program({2, 5, 5}, {3, 2, 3, 3}, 1), theta);
    CHECK(r.max_rel_err <= 1e-6);
  }
  SUBCASE("2d stride 2") {
    const Eigen::VectorXd theta = random_vector(2 * 5 * 5 + 3 * 2 * 9 + 3, rng);
    const FdReport r = fd_check(conv_program({2, 5, 5}, {3, 2, 3, 3}, 2), theta);
    CHECK(r.max_rel_err <= 1e-6);
  }
  SUBCASE("3d stride 1") {
    const Eigen::VectorXd theta =
        random_vector(2 * 4 * 4 * 4 + 2 * 2 * 27 + 2, rng);
    const FdReport r =
        fd_check(conv_program({2, 4, 4, 4}, {2, 2, 3, 3, 3}, 1), theta);
    CHECK(r.max_rel_err <= 1e-6);
  }
  SUBCASE("3d stride 2") {
    const Eigen::VectorXd theta =
        random_vector(2 * 4 * 4 * 4 + 2 * 2 * 27 + 2, rng);
    const FdReport r =
        fd_check(conv_program({2, 4, 4, 4}, {2, 2, 3, 3, 3}, 2), theta);
    CHECK(r.max_rel_err <= 1e-6);
  }
}

TEST_CASE("dense, activation, and elementwise gradients") {
  Rng rng(46);

  SUBCASE("dense") {
    const Eigen::VectorXd theta = random_vector(6 + 4 * 6 + 4, rng);
    const FdReport r = fd_check(
        [](ad::Tape& tape, const Eigen::VectorXd& t) {
          Eigen::Index at = 0;
          TapeBuild b;
          const ad::NodeId x = segment_leaf(tape, t, at, {6});
          const ad::NodeId w = segment_leaf(tape, t, at, {4, 6});
          const ad::NodeId bias = segment_leaf(tape, t, at, {4});
          b.root = tape.sum_squares(tape.dense(x, w, bias));
          b.leaves = {x, w, bias};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);
  }

  SUBCASE("relu away from the kink") {
    Eigen::VectorXd theta(8);
    for (int i = 0; i < 8; ++i) {
      const double mag = rng.next_uniform(0.1, 1.0);
      theta(i) = (i % 2 == 0) ? mag : -mag;  // |x| >= 0.1 > declared margin
    }
    const FdReport r = fd_check(
        [](ad::Tape& tape, const Eigen::VectorXd& t) {
          TapeBuild b;
          const ad::NodeId x = tape.leaf(ad::Value::from_vector(t));
          b.root = tape.sum_squares(tape.relu(x));
          b.leaves = {x};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);
  }

  SUBCASE("tanh") {
    const Eigen::VectorXd theta = random_vector(8, rng, -2.0, 2.0);
    const FdReport r = fd_check(
        [](ad::Tape& tape, const Eigen::VectorXd& t) {
          TapeBuild b;
          const ad::NodeId x = tape.leaf(ad::Value::from_vector(t));
          b.root = tape.sum_squares(tape.tanh_op(x));
          b.leaves = {x};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);
  }

  SUBCASE("reshape, multiply, scale_add, sum, mse_against") {
    const Eigen::VectorXd theta = random_vector(12, rng);
    Rng tgt_rng(47);
    const Eigen::VectorXd target = random_vector(6, tgt_rng);
    const FdReport r = fd_check(
        [&target](ad::Tape& tape, const Eigen::VectorXd& t) {
          TapeBuild b;
          const ad::NodeId x = tape.leaf(ad::Value::from_vector(t.head(6)));
          const ad::NodeId y = tape.leaf(ad::Value::from_vector(t.tail(6)));
          const ad::NodeId xm = tape.reshape(x, {2, 3});
          const ad::NodeId ym = tape.reshape(y, {2, 3});
          const ad::NodeId prod = tape.multiply(xm, ym);
          const ad::NodeId mix = tape.scale_add(prod, ym, -2.5);
          const ad::NodeId mse = tape.mse_against(mix, target);
          const ad::NodeId extra = tape.sum(prod);
          b.root = tape.add(mse, extra);
          b.leaves = {x, y};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);
  }

  SUBCASE("append_rows passes gradient to the variable block only") {
    const Eigen::VectorXd theta = random_vector(6, rng);
    Eigen::MatrixXd fixed(2, 2);
    fixed << 5.0, -3.0, 2.0, 7.0;
    const FdReport r = fd_check(
        [&fixed](ad::Tape& tape, const Eigen::VectorXd& t) {
          TapeBuild b;
          const ad::NodeId x = tape.leaf(ad::Value({3, 2}, t));
          b.root = tape.sum_squares(tape.append_rows(x, fixed));
          b.leaves = {x};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);

    ad::Tape tape;
    const ad::NodeId x = tape.leaf(ad::Value({3, 2}, theta));
    const ad::NodeId out = tape.append_rows(x, fixed);
    CHECK(tape.value(out).dims == std::vector<std::size_t>{5, 2});
    tape.backward(tape.sum_squares(out));
    // Gradient of sum of squares: exactly 2x on the variable block.
    CHECK(tape.grad(x) == (2.0 * theta).eval());
  }
}

TEST_CASE("fused sum_squares equals its two-op composition") {
  Rng rng(48);
  const Eigen::VectorXd v = random_vector(9, rng);

  ad::Tape fused;
  const ad::NodeId xf = fused.leaf(ad::Value::from_vector(v));
  fused.backward(fused.sum_squares(xf));

  ad::Tape composed;
  const ad::NodeId xc = composed.leaf(ad::Value::from_vector(v));
  composed.backward(composed.sum(composed.multiply(xc, xc)));

  // Chain composition: gradients agree bit for bit (2x vs x + x).
  CHECK(fused.grad(xf) == composed.grad(xc));
}

TEST_CASE("linear solve gradients use the implicit relations") {
  Rng rng(49);
  Eigen::MatrixXd a0 = Eigen::MatrixXd::Identity(4, 4);
  for (int i = 0; i < 16; ++i) a0.data()[i] += 0.3 * rng.next_gaussian();

  Eigen::VectorXd theta(16 + 8);
  Eigen::Map<ad::RowMatrixXd>(theta.data(), 4, 4) = a0;
  theta.tail(8) = random_vector(8, rng);

  const FdReport r = fd_check(
      [](ad::Tape& tape, const Eigen::VectorXd& t) {
        TapeBuild b;
        const ad::NodeId a = tape.leaf(ad::Value({4, 4}, t.head(16)));
        const ad::NodeId rhs = tape.leaf(ad::Value({4, 2}, t.tail(8)));
        b.root = tape.sum_squares(tape.linear_solve(a, rhs));
        b.leaves = {a, rhs};
        return b;
      },
      theta);
  CHECK(r.max_rel_err <= 1e-5);

  ad::Tape tape;
  const ad::NodeId sing =
      tape.leaf(ad::Value({2, 2}, Eigen::VectorXd::Ones(4)));
  const ad::NodeId rhs = tape.constant(ad::Value({2, 1}, Eigen::VectorXd::Ones(2)));
  CHECK_THROWS_AS(tape.linear_solve(sing, rhs), SingularSystemError);
}

TEST_CASE("tps solve gradient w.r.t. sources") {
  // Loss = sum of squared spline weights; sources enter through B only.
  LandmarkSet l_T(6, 2);
  l_T << -0.9, -0.8, 0.85, -0.9, -0.8, 0.9, 0.9, 0.85, 0.1, -0.2, -0.3, 0.4;
  Rng rng(50);
  Eigen::VectorXd theta(12);
  Eigen::Map<ad::RowMatrixXd>(theta.data(), 6, 2) = l_T;
  for (int i = 0; i < 12; ++i) theta(i) += rng.next_uniform(-0.1, 0.1);

  const FdReport r = fd_check(
      [&l_T](ad::Tape& tape, const Eigen::VectorXd& t) {
        TapeBuild b;
        const ad::NodeId targets =
            tape.constant(ad::Value::from_matrix(l_T));
        const ad::NodeId sources = tape.leaf(ad::Value({6, 2}, t));
        const ad::NodeId sys = tape.tps_system(targets);
        const ad::NodeId rhs = tape.tps_rhs(sources);
        b.root = tape.sum_squares(tape.linear_solve(sys, rhs));
        b.leaves = {sources};
        return b;
      },
      theta);
  CHECK(r.max_rel_err <= 1e-5);
}

TEST_CASE("tps evaluate gradients w.r.t. weights and centers") {
  LandmarkSet l_T(5, 2);
  l_T << -0.8, -0.8, 0.8, -0.8, -0.8, 0.8, 0.8, 0.8, 0.05, 0.1;
  // Fixed evaluation points, each at least 0.39 from every kernel center so
  // finite differences never straddle the U(r) kink at r = 0.
  Eigen::MatrixXd pts(7, 2);
  pts << -0.5, -0.5, 0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.0, -0.6, -0.6, 0.3,
      0.35, 0.35;

  Rng rng(51);
  Eigen::VectorXd theta(8 * 2 + 5 * 2);
  for (Eigen::Index i = 0; i < theta.size(); ++i)
    theta(i) = rng.next_uniform(-0.5, 0.5);
  Eigen::Map<ad::RowMatrixXd>(theta.data() + 16, 5, 2) = l_T;

  const FdReport r = fd_check(
      [&pts](ad::Tape& tape, const Eigen::VectorXd& t) {
        TapeBuild b;
        const ad::NodeId weights = tape.leaf(ad::Value({8, 2}, t.head(16)));
        const ad::NodeId centers = tape.leaf(ad::Value({5, 2}, t.tail(10)));
        b.root = tape.sum_squares(tape.tps_evaluate(weights, centers, pts));
        b.leaves = {weights, centers};
        return b;
      },
      theta);
  CHECK(r.max_rel_err <= 1e-6);
}

TEST_CASE("image sampling gradients") {
  const ImageTensor img = smooth_image(7, 9, 0.7);

  SUBCASE("interior coords away from cell edges") {
    // Coordinates built from index-space positions with fractional parts in
    // [0.2, 0.8]: at least 1e-3 from every cell edge, as documented.
    Rng rng(52);
    const std::size_t m = 6;
    Eigen::VectorXd theta(2 * m);
    for (std::size_t p = 0; p < m; ++p) {
      const double fi =
          static_cast<double>(rng.next_below(6)) + rng.next_uniform(0.2, 0.8);
      const double fj =
          static_cast<double>(rng.next_below(8)) + rng.next_uniform(0.2, 0.8);
      theta(2 * p) = coord_from_index(0, 7) + fi * (2.0 / 6.0);
      theta(2 * p + 1) = coord_from_index(0, 9) + fj * (2.0 / 8.0);
    }
    const FdReport r = fd_check(
        [&img, m](ad::Tape& tape, const Eigen::VectorXd& t) {
          TapeBuild b;
          const ad::NodeId coords = tape.leaf(ad::Value({m, 2}, t));
          b.root = tape.sum_squares(tape.image_sample(img, coords));
          b.leaves = {coords};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);
  }

  SUBCASE("gradient at a node is the forward cell slope") {
    ad::Tape tape;
    Eigen::VectorXd c(2);
    const std::size_t i = 3, j = 4;
    c << coord_from_index(i, 7), coord_from_index(j, 9);
    const ad::NodeId coords = tape.leaf(ad::Value({1, 2}, c));
    tape.backward(tape.sum(tape.image_sample(img, coords)));
    const Eigen::VectorXd& g = tape.grad(coords);
    const double su = (7.0 - 1.0) / 2.0;
    const double sv = (9.0 - 1.0) / 2.0;
    CHECK(g(0) == doctest::Approx(su * (img.data[(i + 1) * 9 + j] -
                                        img.data[i * 9 + j]))
                      .epsilon(1e-12));
    CHECK(g(1) == doctest::Approx(sv * (img.data[i * 9 + j + 1] -
                                        img.data[i * 9 + j]))
                      .epsilon(1e-12));
  }

  SUBCASE("gradient at the top node uses the one-sided cell") {
    ad::Tape tape;
    Eigen::VectorXd c(2);
    const std::size_t j = 4;
    c << 1.0, coord_from_index(j, 9);  // last node along axis 0
    const ad::NodeId coords = tape.leaf(ad::Value({1, 2}, c));
    tape.backward(tape.sum(tape.image_sample(img, coords)));
    const double su = (7.0 - 1.0) / 2.0;
    CHECK(tape.grad(coords)(0) ==
          doctest::Approx(su * (img.data[6 * 9 + j] - img.data[5 * 9 + j]))
              .epsilon(1e-12));
  }

  SUBCASE("clamped coordinates get zero gradient") {
    ad::Tape tape;
    Eigen::VectorXd c(2);
    c << -1.7, 0.0;  // outside along axis 0
    const ad::NodeId coords = tape.leaf(ad::Value({1, 2}, c));
    tape.backward(tape.sum(tape.image_sample(img, coords)));
    CHECK(tape.grad(coords)(0) == 0.0);
  }

  SUBCASE("constant image gives exactly zero gradient") {
    ImageTensor flat({5, 5});
    for (double& v : flat.data) v = 0.37;
    ad::Tape tape;
    Eigen::VectorXd c(4);
    c << 0.21, -0.4, -0.13, 0.55;
    const ad::NodeId coords = tape.leaf(ad::Value({2, 2}, c));
    tape.backward(tape.sum(tape.image_sample(flat, coords)));
    CHECK(tape.grad(coords).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("condition number gradients") {
  SUBCASE("identity is a stationary point") {
    ad::Tape tape;
    const ad::NodeId a =
        tape.leaf(ad::Value::from_matrix(Eigen::MatrixXd::Identity(4, 4)));
    const ad::NodeId kappa = tape.condition_number(a);
    CHECK(tape.value(kappa).to_scalar() == 4.0);
    tape.backward(kappa);
    CHECK(tape.grad(a).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("finite differences on a well-conditioned matrix") {
    Rng rng(53);
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(5, 5);
    for (int i = 0; i < 25; ++i) m.data()[i] += 0.2 * rng.next_gaussian();
    Eigen::VectorXd theta(25);
    Eigen::Map<ad::RowMatrixXd>(theta.data(), 5, 5) = m;

    const FdReport r = fd_check(
        [](ad::Tape& tape, const Eigen::VectorXd& t) {
          TapeBuild b;
          const ad::NodeId a = tape.leaf(ad::Value({5, 5}, t));
          b.root = tape.condition_number(a);
          b.leaves = {a};
          return b;
        },
        theta);
    CHECK(r.max_rel_err <= 1e-6);
  }

  SUBCASE("scale invariance makes the radial direction flat") {
    Rng rng(54);
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(4, 4);
    for (int i = 0; i < 16; ++i) m.data()[i] += 0.25 * rng.next_gaussian();
    ad::Tape tape;
    const ad::NodeId a = tape.leaf(ad::Value::from_matrix(m));
    tape.backward(tape.condition_number(a));
    const Eigen::VectorXd& g = tape.grad(a);
    Eigen::VectorXd dir(16);
    Eigen::Map<ad::RowMatrixXd>(dir.data(), 4, 4) = m;
    // d/dt kappa((1 + t) A) = 0 at t = 0.
    CHECK(std::abs(g.dot(dir)) <= 1e-10 * g.norm() * dir.norm());
  }

  SUBCASE("kappa and its gradient grow as the matrix nears singularity") {
    double prev_kappa = 0.0, prev_gnorm = 0.0;
    for (const double eps : {0.5, 0.05, 0.005}) {
      Eigen::MatrixXd m = Eigen::MatrixXd::Identity(3, 3);
      m(2, 2) = eps;
      ad::Tape tape;
      const ad::NodeId a = tape.leaf(ad::Value::from_matrix(m));
      const ad::NodeId kappa = tape.condition_number(a);
      // SVD-free oracle for a diagonal matrix.
      const double expect =
          std::sqrt((2.0 + eps * eps) * (2.0 + 1.0 / (eps * eps)));
      CHECK(tape.value(kappa).to_scalar() ==
            doctest::Approx(expect).epsilon(1e-12));
      tape.backward(kappa);
      const double gnorm = tape.grad(a).norm();
      CHECK(tape.value(kappa).to_scalar() > prev_kappa);
      CHECK(gnorm > prev_gnorm);
      prev_kappa = tape.value(kappa).to_scalar();
      prev_gnorm = gnorm;
    }
  }
}

TEST_CASE("registration loss gradient w.r.t. target landmarks") {
  // Target landmarks drive the system matrix, the evaluation kernels, and
  // (through the solve) the weights: the full Eq.-style loss path.
  const ImageTensor source = smooth_image(9, 9, 0.2);
  const ImageTensor target = smooth_image(9, 9, 1.1);
  const Eigen::VectorXd target_flat = Eigen::Map<const Eigen::VectorXd>(
      target.data.data(), static_cast<Eigen::Index>(target.data.size()));
  const Eigen::MatrixXd grid = grid_coordinates({9, 9});

  LandmarkSet l_T(6, 2);
  l_T << -0.82, -0.79, 0.81, -0.83, -0.78, 0.84, 0.83, 0.8, 0.12, -0.18,
      -0.31, 0.37;
  Rng rng(55);
  LandmarkSet l_S = l_T;
  for (int i = 0; i < l_S.size(); ++i)
    l_S.data()[i] += rng.next_uniform(-0.06, 0.06);

  Eigen::VectorXd theta(12);
  Eigen::Map<ad::RowMatrixXd>(theta.data(), 6, 2) = l_T;

  const FdReport r = fd_check(
      [&](ad::Tape& tape, const Eigen::VectorXd& t) {
        TapeBuild b;
        const ad::NodeId targets = tape.leaf(ad::Value({6, 2}, t));
        const ad::NodeId sources = tape.constant(ad::Value::from_matrix(l_S));
        const ad::NodeId sys = tape.tps_system(targets);
        const ad::NodeId rhs = tape.tps_rhs(sources);
        const ad::NodeId weights = tape.linear_solve(sys, rhs);
        const ad::NodeId coords = tape.tps_evaluate(weights, targets, grid);
        const ad::NodeId sampled = tape.image_sample(source, coords);
        const ad::NodeId match = tape.mse_against(sampled, target_flat);
        const ad::NodeId reg = tape.condition_number(sys);
        b.root = tape.scale_add(match, reg, 1e-4);
        b.leaves = {targets};
        return b;
      },
      theta);
  CHECK(r.max_rel_err <= 1e-4);
}

TEST_CASE("full siamese pipeline gradient on a tiny model") {
  // Two weight-shared towers (conv-relu-conv-relu-dense-tanh) produce the
  // landmark pair; the loss composes the spline solve, grid warp, image
  // resampling, and the condition-number regularizer. Every parameter's
  // gradient is probed against finite differences.
  const ImageTensor img_t = smooth_image(8, 8, 0.0);
  const ImageTensor img_s = smooth_image(8, 8, 2.3);
  const Eigen::VectorXd target_flat = Eigen::Map<const Eigen::VectorXd>(
      img_t.data.data(), static_cast<Eigen::Index>(img_t.data.size()));
  const Eigen::MatrixXd grid = grid_coordinates({8, 8});
  const LandmarkSet anchors = corner_landmarks(2);

  // k1 {2,1,3,3} b1 {2} k2 {4,2,3,3} b2 {4} w {8,16} b {8} = 232 params.
  const Eigen::Index n_params = 18 + 2 + 72 + 4 + 128 + 8;
  Rng rng(56);
  Eigen::VectorXd theta(n_params);
  for (Eigen::Index i = 0; i < n_params; ++i)
    theta(i) = 0.25 * rng.next_gaussian();
  // Bias the output layer so the learned landmarks sit well apart instead
  // of collapsing at the origin (which would make the spline system nearly
  // singular and the finite differences meaningless).
  const double spread = std::atanh(0.55);
  const double off[8] = {-spread, -spread, -spread, spread,
                         spread,  -spread, spread,  spread};
  for (int i = 0; i < 8; ++i) theta(224 + i) = off[i];

  const auto program = [&](ad::Tape& tape, const Eigen::VectorXd& t) {
    Eigen::Index at = 0;
    TapeBuild b;
    const ad::NodeId k1 = segment_leaf(tape, t, at, {2, 1, 3, 3});
    const ad::NodeId b1 = segment_leaf(tape, t, at, {2});
    const ad::NodeId k2 = segment_leaf(tape, t, at, {4, 2, 3, 3});
    const ad::NodeId b2 = segment_leaf(tape, t, at, {4});
    const ad::NodeId w = segment_leaf(tape, t, at, {8, 16});
    const ad::NodeId bias = segment_leaf(tape, t, at, {8});

    const auto tower = [&](const ImageTensor& img) {
      const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(
          img.data.data(), static_cast<Eigen::Index>(img.data.size()));
      const ad::NodeId input = tape.constant(ad::Value({1, 8, 8}, flat));
      ad::NodeId x = tape.relu(tape.conv(input, k1, b1, 2));   // {2,4,4}
      x = tape.relu(tape.conv(x, k2, b2, 2));                  // {4,2,2}
      x = tape.tanh_op(tape.dense(x, w, bias));                // {8}
      x = tape.reshape(x, {4, 2});
      return tape.append_rows(x, anchors);                     // {8,2}
    };

    const ad::NodeId l_t = tower(img_t);
    const ad::NodeId l_s = tower(img_s);
    const ad::NodeId sys = tape.tps_system(l_t);
    const ad::NodeId rhs = tape.tps_rhs(l_s);
    const ad::NodeId weights = tape.linear_solve(sys, rhs);
    const ad::NodeId coords = tape.tps_evaluate(weights, l_t, grid);
    const ad::NodeId sampled = tape.image_sample(img_s, coords);
    const ad::NodeId match = tape.mse_against(sampled, target_flat);
    const ad::NodeId reg = tape.condition_number(sys);
    b.root = tape.scale_add(match, reg, 1e-3);
    b.leaves = {k1, b1, k2, b2, w, bias};
    return b;
  };

  // Probe a deterministic spread of parameters across all six blocks.
  std::vector<Eigen::Index> probe;
  for (Eigen::Index i = 0; i < n_params; i += 6) probe.push_back(i);
  probe.push_back(n_params - 1);

  const FdReport r = fd_check(program, theta, 1e-5, probe);
  CAPTURE(r.worst_index);
  CAPTURE(r.worst_analytic);
  CAPTURE(r.worst_central);
  CHECK(r.max_rel_err <= 1e-4);

  // Determinism: a fresh backward over the same tape reproduces gradients
  // bit for bit.
  ad::Tape tape;
  const TapeBuild build = program(tape, theta);
  tape.backward(build.root);
  std::vector<Eigen::VectorXd> first;
  for (const ad::NodeId leaf : build.leaves) first.push_back(tape.grad(leaf));
  tape.backward(build.root);
  for (std::size_t i = 0; i < build.leaves.size(); ++i)
    CHECK(tape.grad(build.leaves[i]) == first[i]);
}

}  // TEST_SUITE
