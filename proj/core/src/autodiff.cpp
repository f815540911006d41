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

#include "morphoscope/autodiff.hpp"

#include <cmath>
#include <memory>
#include <string>
#include <utility>

#include "morphoscope/errors.hpp"
#include "morphoscope/tps.hpp"

namespace morphoscope::ad {

namespace {

std::size_t product(const std::vector<std::size_t>& dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

using MapRow = Eigen::Map<RowMatrixXd>;
using MapRowConst = Eigen::Map<const RowMatrixXd>;

// Patch matrix for a 3x3 kernel with zero padding 1: row ci*9 + ky*3 + kx,
// column oy*Wo + ox.
Eigen::MatrixXd im2col_2d(const double* in, std::size_t c, std::size_t h,
                          std::size_t w, int stride, std::size_t ho,
                          std::size_t wo) {
  Eigen::MatrixXd col = Eigen::MatrixXd::Zero(
      static_cast<Eigen::Index>(c * 9), static_cast<Eigen::Index>(ho * wo));
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const Eigen::Index p = static_cast<Eigen::Index>(oy * wo + ox);
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double* plane = in + ci * h * w;
        for (int ky = 0; ky < 3; ++ky) {
          const long iy = static_cast<long>(oy) * stride + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const long ix = static_cast<long>(ox) * stride + kx - 1;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            col(static_cast<Eigen::Index>(ci * 9 + ky * 3 + kx), p) =
                plane[iy * static_cast<long>(w) + ix];
          }
        }
      }
    }
  }
  return col;
}

void col2im_2d_add(const Eigen::MatrixXd& colgrad, double* gin, std::size_t c,
                   std::size_t h, std::size_t w, int stride, std::size_t ho,
                   std::size_t wo) {
  for (std::size_t oy = 0; oy < ho; ++oy) {
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const Eigen::Index p = static_cast<Eigen::Index>(oy * wo + ox);
      for (std::size_t ci = 0; ci < c; ++ci) {
        double* plane = gin + ci * h * w;
        for (int ky = 0; ky < 3; ++ky) {
          const long iy = static_cast<long>(oy) * stride + ky - 1;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const long ix = static_cast<long>(ox) * stride + kx - 1;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            plane[iy * static_cast<long>(w) + ix] +=
                colgrad(static_cast<Eigen::Index>(ci * 9 + ky * 3 + kx), p);
          }
        }
      }
    }
  }
}

// 3D analogue: row ci*27 + kz*9 + ky*3 + kx, column (oz*Ho + oy)*Wo + ox.
Eigen::MatrixXd im2col_3d(const double* in, std::size_t c, std::size_t dz,
                          std::size_t h, std::size_t w, int stride,
                          std::size_t zo, std::size_t ho, std::size_t wo) {
  Eigen::MatrixXd col =
      Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c * 27),
                            static_cast<Eigen::Index>(zo * ho * wo));
  for (std::size_t oz = 0; oz < zo; ++oz) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Eigen::Index p =
            static_cast<Eigen::Index>((oz * ho + oy) * wo + ox);
        for (std::size_t ci = 0; ci < c; ++ci) {
          const double* vol = in + ci * dz * h * w;
          for (int kz = 0; kz < 3; ++kz) {
            const long iz = static_cast<long>(oz) * stride + kz - 1;
            if (iz < 0 || iz >= static_cast<long>(dz)) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const long iy = static_cast<long>(oy) * stride + ky - 1;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const long ix = static_cast<long>(ox) * stride + kx - 1;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                col(static_cast<Eigen::Index>(ci * 27 + kz * 9 + ky * 3 + kx),
                    p) = vol[(iz * static_cast<long>(h) + iy) *
                                 static_cast<long>(w) +
                             ix];
              }
            }
          }
        }
      }
    }
  }
  return col;
}

void col2im_3d_add(const Eigen::MatrixXd& colgrad, double* gin, std::size_t c,
                   std::size_t dz, std::size_t h, std::size_t w, int stride,
                   std::size_t zo, std::size_t ho, std::size_t wo) {
  for (std::size_t oz = 0; oz < zo; ++oz) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const Eigen::Index p =
            static_cast<Eigen::Index>((oz * ho + oy) * wo + ox);
        for (std::size_t ci = 0; ci < c; ++ci) {
          double* vol = gin + ci * dz * h * w;
          for (int kz = 0; kz < 3; ++kz) {
            const long iz = static_cast<long>(oz) * stride + kz - 1;
            if (iz < 0 || iz >= static_cast<long>(dz)) continue;
            for (int ky = 0; ky < 3; ++ky) {
              const long iy = static_cast<long>(oy) * stride + ky - 1;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const long ix = static_cast<long>(ox) * stride + kx - 1;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                vol[(iz * static_cast<long>(h) + iy) * static_cast<long>(w) +
                    ix] +=
                    colgrad(static_cast<Eigen::Index>(ci * 27 + kz * 9 +
                                                      ky * 3 + kx),
                            p);
              }
            }
          }
        }
      }
    }
  }
}

std::size_t conv_out_extent(std::size_t n, int stride) {
  return (n - 1) / static_cast<std::size_t>(stride) + 1;
}

}  // namespace

// --- Value -----------------------------------------------------------------

Value::Value(std::vector<std::size_t> shape, Eigen::VectorXd flat)
    : dims(std::move(shape)), data(std::move(flat)) {
  if (product(dims) != static_cast<std::size_t>(data.size()))
    throw DimensionMismatchError("Value: shape does not match buffer size");
}

Value Value::scalar(double x) {
  Eigen::VectorXd v(1);
  v[0] = x;
  return Value({1}, std::move(v));
}

Value Value::from_matrix(const Eigen::MatrixXd& m) {
  Eigen::VectorXd flat(m.size());
  MapRow(flat.data(), m.rows(), m.cols()) = m;
  return Value({static_cast<std::size_t>(m.rows()),
                static_cast<std::size_t>(m.cols())},
               std::move(flat));
}

Value Value::from_vector(const Eigen::VectorXd& v) {
  return Value({static_cast<std::size_t>(v.size())}, v);
}

Value Value::from_image(const ImageTensor& img) {
  Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(
      img.data.data(), static_cast<Eigen::Index>(img.data.size()));
  return Value(img.dims, std::move(flat));
}

std::size_t Value::element_count() const { return product(dims); }

Eigen::Map<const RowMatrixXd> Value::as_matrix(std::size_t rows,
                                               std::size_t cols) const {
  if (rows * cols != static_cast<std::size_t>(data.size()))
    throw DimensionMismatchError("Value::as_matrix: element count mismatch");
  return MapRowConst(data.data(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}

Eigen::MatrixXd Value::to_matrix() const {
  if (dims.size() != 2)
    throw DimensionMismatchError("Value::to_matrix: value is not rank 2");
  return as_matrix(dims[0], dims[1]);
}

double Value::to_scalar() const {
  if (data.size() != 1)
    throw DimensionMismatchError("Value::to_scalar: value is not scalar");
  return data[0];
}

// --- Tape bookkeeping --------------------------------------------------------

NodeId Tape::push(Value v, bool is_tracked,
                  std::function<void(Tape&)> backprop) {
  Node node;
  node.value = std::move(v);
  node.tracked = is_tracked;
  node.backprop = std::move(backprop);
  nodes_.push_back(std::move(node));
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Value v) { return push(std::move(v), true, nullptr); }

NodeId Tape::constant(Value v) { return push(std::move(v), false, nullptr); }

const Value& Tape::value(NodeId id) const { return nodes_.at(id).value; }

const Eigen::VectorXd& Tape::grad(NodeId id) const {
  const Node& n = nodes_.at(id);
  static const Eigen::VectorXd kEmpty;
  return n.has_grad ? n.grad : kEmpty;
}

bool Tape::tracked(NodeId id) const { return nodes_.at(id).tracked; }

Eigen::VectorXd& Tape::grad_buffer(NodeId id) {
  Node& n = nodes_.at(id);
  if (!n.has_grad) {
    n.grad.setZero(n.value.data.size());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(NodeId id, const Eigen::VectorXd& g) {
  if (!nodes_.at(id).tracked) return;
  grad_buffer(id) += g;
}

void Tape::backward(NodeId root) {
  const Node& r = nodes_.at(root);
  if (r.value.data.size() != 1)
    throw InvalidArgumentError("backward: root node must be scalar");
  for (Node& n : nodes_) n.has_grad = false;
  if (!r.tracked) return;  // constant root: nothing depends on any leaf
  grad_buffer(root)[0] = 1.0;
  for (NodeId id = root + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.tracked || !n.backprop || !n.has_grad) continue;
    n.backprop(*this);
  }
}

// --- Network ops -------------------------------------------------------------

NodeId Tape::conv(NodeId input, NodeId kernel, NodeId bias, int stride) {
  const Value& in = value(input);
  const Value& ker = value(kernel);
  const Value& b = value(bias);
  if (stride != 1 && stride != 2)
    throw InvalidArgumentError("conv: stride must be 1 or 2");
  const std::size_t rank = in.rank();
  if (rank != 3 && rank != 4)
    throw DimensionMismatchError(
        "conv: input must be {channels, spatial...} with 2 or 3 spatial axes");
  const std::size_t sdim = rank - 1;
  const std::size_t kvol = sdim == 2 ? 9 : 27;
  if (ker.rank() != sdim + 2)
    throw DimensionMismatchError("conv: kernel rank mismatch");
  for (std::size_t a = 2; a < ker.rank(); ++a)
    if (ker.dims[a] != 3)
      throw DimensionMismatchError("conv: kernel extent must be 3");
  const std::size_t c_out = ker.dims[0];
  const std::size_t c_in = ker.dims[1];
  if (in.dims[0] != c_in)
    throw DimensionMismatchError("conv: input channel count mismatch");
  if (b.element_count() != c_out)
    throw DimensionMismatchError("conv: bias size mismatch");

  std::vector<std::size_t> out_dims(rank);
  out_dims[0] = c_out;
  std::size_t patches = 1;
  for (std::size_t a = 1; a < rank; ++a) {
    if (in.dims[a] < 2)
      throw DimensionMismatchError("conv: spatial extent must be >= 2");
    out_dims[a] = conv_out_extent(in.dims[a], stride);
    patches *= out_dims[a];
  }

  auto col = std::make_shared<Eigen::MatrixXd>(
      sdim == 2 ? im2col_2d(in.data.data(), c_in, in.dims[1], in.dims[2],
                            stride, out_dims[1], out_dims[2])
                : im2col_3d(in.data.data(), c_in, in.dims[1], in.dims[2],
                            in.dims[3], stride, out_dims[1], out_dims[2],
                            out_dims[3]));

  Eigen::VectorXd flat(c_out * patches);
  {
    MapRow out_mat(flat.data(), static_cast<Eigen::Index>(c_out),
                   static_cast<Eigen::Index>(patches));
    MapRowConst ker_mat(ker.data.data(), static_cast<Eigen::Index>(c_out),
                        static_cast<Eigen::Index>(c_in * kvol));
    out_mat.noalias() = ker_mat * (*col);
    out_mat.colwise() += b.data;
  }

  const bool track = tracked(input) || tracked(kernel) || tracked(bias);
  std::vector<std::size_t> in_dims = in.dims;
  NodeId out = push(Value(std::move(out_dims), std::move(flat)), track,
                    nullptr);
  nodes_[out].backprop = [out, input, kernel, bias, stride, col, c_out, c_in,
                          kvol, patches, in_dims, sdim](Tape& t) {
    MapRowConst g(t.grad(out).data(), static_cast<Eigen::Index>(c_out),
                  static_cast<Eigen::Index>(patches));
    if (t.tracked(bias)) {
      Eigen::Map<Eigen::VectorXd> bg(t.grad_buffer(bias).data(),
                                     static_cast<Eigen::Index>(c_out));
      bg += g.rowwise().sum();
    }
    if (t.tracked(kernel)) {
      MapRow kg(t.grad_buffer(kernel).data(),
                static_cast<Eigen::Index>(c_out),
                static_cast<Eigen::Index>(c_in * kvol));
      kg.noalias() += g * col->transpose();
    }
    if (t.tracked(input)) {
      MapRowConst ker_mat(t.value(kernel).data.data(),
                          static_cast<Eigen::Index>(c_out),
                          static_cast<Eigen::Index>(c_in * kvol));
      Eigen::MatrixXd colgrad = ker_mat.transpose() * g;
      double* gin = t.grad_buffer(input).data();
      if (sdim == 2)
        col2im_2d_add(colgrad, gin, c_in, in_dims[1], in_dims[2], stride,
                      conv_out_extent(in_dims[1], stride),
                      conv_out_extent(in_dims[2], stride));
      else
        col2im_3d_add(colgrad, gin, c_in, in_dims[1], in_dims[2], in_dims[3],
                      stride, conv_out_extent(in_dims[1], stride),
                      conv_out_extent(in_dims[2], stride),
                      conv_out_extent(in_dims[3], stride));
    }
  };
  return out;
}

NodeId Tape::dense(NodeId input, NodeId weights, NodeId bias) {
  const Value& in = value(input);
  const Value& w = value(weights);
  const Value& b = value(bias);
  if (w.rank() != 2)
    throw DimensionMismatchError("dense: weights must be rank 2");
  const std::size_t m = w.dims[0];
  const std::size_t n = w.dims[1];
  if (in.element_count() != n)
    throw DimensionMismatchError("dense: input size does not match weights");
  if (b.element_count() != m)
    throw DimensionMismatchError("dense: bias size mismatch");

  Eigen::VectorXd flat(m);
  flat.noalias() = w.as_matrix(m, n) * in.data;
  flat += b.data;

  const bool track = tracked(input) || tracked(weights) || tracked(bias);
  NodeId out = push(Value({m}, std::move(flat)), track, nullptr);
  nodes_[out].backprop = [out, input, weights, bias, m, n](Tape& t) {
    const Eigen::VectorXd& g = t.grad(out);
    if (t.tracked(bias)) t.grad_buffer(bias) += g;
    if (t.tracked(weights)) {
      MapRow wg(t.grad_buffer(weights).data(), static_cast<Eigen::Index>(m),
                static_cast<Eigen::Index>(n));
      wg.noalias() += g * t.value(input).data.transpose();
    }
    if (t.tracked(input)) {
      t.grad_buffer(input).noalias() +=
          t.value(weights).as_matrix(m, n).transpose() * g;
    }
  };
  return out;
}

NodeId Tape::relu(NodeId x) {
  const Value& in = value(x);
  Eigen::VectorXd flat = in.data.cwiseMax(0.0);
  NodeId out = push(Value(in.dims, std::move(flat)), tracked(x), nullptr);
  nodes_[out].backprop = [out, x](Tape& t) {
    if (!t.tracked(x)) return;
    const Eigen::VectorXd& g = t.grad(out);
    const Eigen::VectorXd& v = t.value(x).data;
    // relu'(0) == 0 by convention
    t.grad_buffer(x).array() +=
        g.array() * (v.array() > 0.0).cast<double>();
  };
  return out;
}

NodeId Tape::tanh_op(NodeId x) {
  const Value& in = value(x);
  Eigen::VectorXd flat = in.data.array().tanh();
  NodeId out = push(Value(in.dims, std::move(flat)), tracked(x), nullptr);
  nodes_[out].backprop = [out, x](Tape& t) {
    if (!t.tracked(x)) return;
    const Eigen::VectorXd& g = t.grad(out);
    const Eigen::VectorXd& y = t.value(out).data;
    t.grad_buffer(x).array() += g.array() * (1.0 - y.array().square());
  };
  return out;
}

NodeId Tape::reshape(NodeId x, std::vector<std::size_t> dims) {
  const Value& in = value(x);
  if (product(dims) != in.element_count())
    throw DimensionMismatchError("reshape: element count mismatch");
  NodeId out =
      push(Value(std::move(dims), in.data), tracked(x), nullptr);
  nodes_[out].backprop = [out, x](Tape& t) {
    if (t.tracked(x)) t.grad_buffer(x) += t.grad(out);
  };
  return out;
}

NodeId Tape::append_rows(NodeId matrix, const Eigen::MatrixXd& fixed) {
  const Value& in = value(matrix);
  if (in.rank() != 2)
    throw DimensionMismatchError("append_rows: node must be rank 2");
  const std::size_t r = in.dims[0];
  const std::size_t c = in.dims[1];
  if (fixed.size() > 0 && static_cast<std::size_t>(fixed.cols()) != c)
    throw DimensionMismatchError("append_rows: column count mismatch");
  const std::size_t ra = static_cast<std::size_t>(fixed.rows());

  Eigen::VectorXd flat(static_cast<Eigen::Index>((r + ra) * c));
  flat.head(static_cast<Eigen::Index>(r * c)) = in.data;
  if (ra > 0)
    MapRow(flat.data() + r * c, static_cast<Eigen::Index>(ra),
           static_cast<Eigen::Index>(c)) = fixed;

  NodeId out =
      push(Value({r + ra, c}, std::move(flat)), tracked(matrix), nullptr);
  nodes_[out].backprop = [out, matrix, r, c](Tape& t) {
    if (t.tracked(matrix))
      t.grad_buffer(matrix) +=
          t.grad(out).head(static_cast<Eigen::Index>(r * c));
  };
  return out;
}

// --- Registration ops --------------------------------------------------------

NodeId Tape::tps_system(NodeId targets) {
  const Value& tv = value(targets);
  if (tv.rank() != 2)
    throw DimensionMismatchError("tps_system: landmarks must be rank 2");
  const Eigen::MatrixXd t_mat = tv.to_matrix();
  // assemble() owns the layout of A; reusing it keeps the tape op and the
  // plain registration path structurally identical.
  Eigen::MatrixXd a = assemble(t_mat, t_mat).A;
  const std::size_t k = tv.dims[0];
  const int d = static_cast<int>(tv.dims[1]);
  const std::size_t n = k + static_cast<std::size_t>(d) + 1;

  NodeId out = push(Value::from_matrix(a), tracked(targets), nullptr);
  nodes_[out].backprop = [out, targets, k, d, n](Tape& t) {
    if (!t.tracked(targets)) return;
    MapRowConst g(t.grad(out).data(), static_cast<Eigen::Index>(n),
                  static_cast<Eigen::Index>(n));
    const Eigen::MatrixXd tm = t.value(targets).to_matrix();
    MapRow tg(t.grad_buffer(targets).data(), static_cast<Eigen::Index>(k),
              static_cast<Eigen::Index>(d));
    const Eigen::Index kk = static_cast<Eigen::Index>(k);
    for (Eigen::Index i = 0; i < kk; ++i) {
      for (Eigen::Index j = i + 1; j < kk; ++j) {
        const Eigen::RowVectorXd diff = tm.row(i) - tm.row(j);
        const double r = diff.norm();
        if (r == 0.0) continue;  // declared non-smooth point of the kernel
        const double a_bar = g(i, j) + g(j, i);
        const double factor = a_bar * tps_kernel_derivative(r, d) / r;
        tg.row(i) += factor * diff;
        tg.row(j) -= factor * diff;
      }
      for (int a = 0; a < d; ++a)
        tg(i, a) += g(i, kk + 1 + a) + g(kk + 1 + a, i);
    }
  };
  return out;
}

NodeId Tape::tps_rhs(NodeId sources) {
  const Value& sv = value(sources);
  if (sv.rank() != 2)
    throw DimensionMismatchError("tps_rhs: landmarks must be rank 2");
  const std::size_t k = sv.dims[0];
  const std::size_t d = sv.dims[1];
  const std::size_t n = k + d + 1;

  Eigen::VectorXd flat = Eigen::VectorXd::Zero(
      static_cast<Eigen::Index>(n * d));
  flat.head(static_cast<Eigen::Index>(k * d)) = sv.data;
  NodeId out = push(Value({n, d}, std::move(flat)), tracked(sources), nullptr);
  nodes_[out].backprop = [out, sources, k, d](Tape& t) {
    if (t.tracked(sources))
      t.grad_buffer(sources) +=
          t.grad(out).head(static_cast<Eigen::Index>(k * d));
  };
  return out;
}

NodeId Tape::linear_solve(NodeId a, NodeId b) {
  const Value& av = value(a);
  const Value& bv = value(b);
  if (av.rank() != 2 || av.dims[0] != av.dims[1])
    throw DimensionMismatchError("linear_solve: matrix must be square");
  if (bv.rank() != 2 || bv.dims[0] != av.dims[0])
    throw DimensionMismatchError("linear_solve: right-hand side mismatch");
  const std::size_t n = av.dims[0];
  const std::size_t d = bv.dims[1];

  const Eigen::MatrixXd a_mat = av.to_matrix();
  const double max_abs = a_mat.cwiseAbs().maxCoeff();
  auto lu = std::make_shared<Eigen::PartialPivLU<Eigen::MatrixXd>>(a_mat);
  const double min_pivot = lu->matrixLU().diagonal().cwiseAbs().minCoeff();
  if (!(min_pivot > kSingularPivotTolerance * max_abs))
    throw SingularSystemError(
        "linear_solve: system is singular or numerically singular (pivot " +
        std::to_string(min_pivot) + ")");
  const Eigen::MatrixXd w = lu->solve(bv.to_matrix());

  const bool track = tracked(a) || tracked(b);
  NodeId out = push(Value::from_matrix(w), track, nullptr);
  nodes_[out].backprop = [out, a, b, lu, n, d](Tape& t) {
    MapRowConst g(t.grad(out).data(), static_cast<Eigen::Index>(n),
                  static_cast<Eigen::Index>(d));
    // Implicit differentiation of A W = B.
    const Eigen::MatrixXd x = lu->transpose().solve(Eigen::MatrixXd(g));
    if (t.tracked(b)) {
      MapRow bg(t.grad_buffer(b).data(), static_cast<Eigen::Index>(n),
                static_cast<Eigen::Index>(d));
      bg += x;
    }
    if (t.tracked(a)) {
      MapRow ag(t.grad_buffer(a).data(), static_cast<Eigen::Index>(n),
                static_cast<Eigen::Index>(n));
      ag.noalias() -= x * t.value(out).as_matrix(n, d).transpose();
    }
  };
  return out;
}

NodeId Tape::tps_evaluate(NodeId weights, NodeId targets,
                          const Eigen::MatrixXd& points) {
  const Value& wv = value(weights);
  const Value& tv = value(targets);
  if (wv.rank() != 2 || tv.rank() != 2)
    throw DimensionMismatchError("tps_evaluate: rank-2 nodes required");
  const std::size_t k = tv.dims[0];
  const std::size_t d = tv.dims[1];
  if (wv.dims[0] != k + d + 1 || wv.dims[1] != d)
    throw DimensionMismatchError(
        "tps_evaluate: weight shape does not match landmarks");
  if (static_cast<std::size_t>(points.cols()) != d)
    throw DimensionMismatchError("tps_evaluate: point dimension mismatch");
  const Eigen::Index m = points.rows();
  const Eigen::Index kk = static_cast<Eigen::Index>(k);
  const int di = static_cast<int>(d);

  const Eigen::MatrixXd t_mat = tv.to_matrix();
  const MapRowConst w_mat = wv.as_matrix(k + d + 1, d);

  // Kernel values u and the shared backward factor u'(r)/r in one pass so
  // the log is not recomputed during the reverse sweep.
  auto u = std::make_shared<Eigen::MatrixXd>(m, kk);
  auto dfac = std::make_shared<Eigen::MatrixXd>(m, kk);
  for (Eigen::Index p = 0; p < m; ++p) {
    for (Eigen::Index i = 0; i < kk; ++i) {
      const double r = (points.row(p) - t_mat.row(i)).norm();
      if (r == 0.0) {
        (*u)(p, i) = 0.0;
        (*dfac)(p, i) = 0.0;  // declared non-smooth point
      } else if (di == 2) {
        const double lr = std::log(r);
        (*u)(p, i) = r * r * lr;
        (*dfac)(p, i) = 2.0 * lr + 1.0;
      } else {
        (*u)(p, i) = r;
        (*dfac)(p, i) = 1.0 / r;
      }
    }
  }

  Eigen::MatrixXd out_mat = points * w_mat.bottomRows(di);
  out_mat.rowwise() += w_mat.row(kk);
  out_mat.noalias() += (*u) * w_mat.topRows(kk);

  auto pts = std::make_shared<Eigen::MatrixXd>(points);
  const bool track = tracked(weights) || tracked(targets);
  NodeId out = push(Value::from_matrix(out_mat), track, nullptr);
  nodes_[out].backprop = [out, weights, targets, u, dfac, pts, k, d,
                          m](Tape& t) {
    const Eigen::Index kk2 = static_cast<Eigen::Index>(k);
    const int di2 = static_cast<int>(d);
    MapRowConst g(t.grad(out).data(), m, di2);
    const MapRowConst w_now = t.value(weights).as_matrix(k + d + 1, d);
    if (t.tracked(weights)) {
      MapRow wg(t.grad_buffer(weights).data(),
                static_cast<Eigen::Index>(k + d + 1),
                static_cast<Eigen::Index>(d));
      wg.topRows(kk2).noalias() += u->transpose() * g;
      wg.row(kk2) += g.colwise().sum();
      wg.bottomRows(di2).noalias() += pts->transpose() * g;
    }
    if (t.tracked(targets)) {
      const Eigen::MatrixXd tm = t.value(targets).to_matrix();
      // s(p, i) = sum_a g(p, a) w_top(i, a)
      const Eigen::MatrixXd s = g * w_now.topRows(kk2).transpose();
      MapRow tg(t.grad_buffer(targets).data(), kk2,
                static_cast<Eigen::Index>(d));
      for (Eigen::Index i = 0; i < kk2; ++i) {
        for (Eigen::Index p = 0; p < m; ++p) {
          const double c = s(p, i) * (*dfac)(p, i);
          if (c == 0.0) continue;
          tg.row(i) += c * (tm.row(i) - pts->row(p));
        }
      }
    }
  };
  return out;
}

NodeId Tape::image_sample(const ImageTensor& image, NodeId coords) {
  const Value& cv = value(coords);
  if (cv.rank() != 2)
    throw DimensionMismatchError("image_sample: coords must be rank 2");
  const std::size_t m = cv.dims[0];
  const std::size_t d = cv.dims[1];
  if (d != image.ndim())
    throw DimensionMismatchError(
        "image_sample: coordinate dimension does not match image rank");

  const std::span<const double> flat(cv.data.data(),
                                     static_cast<std::size_t>(cv.data.size()));
  std::vector<double> sampled = sample_points(image, flat, m);
  Eigen::VectorXd out_flat = Eigen::Map<const Eigen::VectorXd>(
      sampled.data(), static_cast<Eigen::Index>(sampled.size()));

  auto img = std::make_shared<const ImageTensor>(image);
  NodeId out = push(Value({m}, std::move(out_flat)), tracked(coords), nullptr);
  nodes_[out].backprop = [out, coords, img, m, d](Tape& t) {
    if (!t.tracked(coords)) return;
    const Eigen::VectorXd& g = t.grad(out);
    const Eigen::VectorXd& cflat = t.value(coords).data;
    MapRow cg(t.grad_buffer(coords).data(), static_cast<Eigen::Index>(m),
              static_cast<Eigen::Index>(d));

    std::vector<std::size_t> stride(d, 1);
    for (std::size_t a = d - 1; a-- > 0;)
      stride[a] = stride[a + 1] * img->dims[a + 1];

    std::vector<AxisTap> taps(d);
    const std::size_t corners = std::size_t{1} << d;
    for (std::size_t p = 0; p < m; ++p) {
      const double gp = g[static_cast<Eigen::Index>(p)];
      if (gp == 0.0) continue;
      for (std::size_t a = 0; a < d; ++a)
        taps[a] =
            axis_tap(cflat[static_cast<Eigen::Index>(p * d + a)],
                     img->dims[a]);
      for (std::size_t mask = 0; mask < corners; ++mask) {
        std::size_t idx = 0;
        for (std::size_t a = 0; a < d; ++a)
          idx += (taps[a].i0 + ((mask >> a) & 1)) * stride[a];
        const double pixel = img->data[idx];
        if (pixel == 0.0) continue;
        for (std::size_t a = 0; a < d; ++a) {
          if (taps[a].dindex_dcoord == 0.0) continue;
          double w = 1.0;
          for (std::size_t b = 0; b < d; ++b) {
            if (b == a) continue;
            w *= ((mask >> b) & 1) ? taps[b].frac : 1.0 - taps[b].frac;
          }
          const double sign = ((mask >> a) & 1) ? 1.0 : -1.0;
          cg(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(a)) +=
              gp * sign * w * pixel * taps[a].dindex_dcoord;
        }
      }
    }
  };
  return out;
}

NodeId Tape::condition_number(NodeId a) {
  const Value& av = value(a);
  if (av.rank() != 2 || av.dims[0] != av.dims[1])
    throw DimensionMismatchError("condition_number: matrix must be square");
  const std::size_t n = av.dims[0];

  // Mirrors condition_frobenius(), keeping the inverse for the backward pass.
  const Eigen::MatrixXd a_mat = av.to_matrix();
  const double max_abs = a_mat.cwiseAbs().maxCoeff();
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(a_mat);
  const double min_pivot = lu.matrixLU().diagonal().cwiseAbs().minCoeff();
  if (!(min_pivot > kSingularPivotTolerance * max_abs))
    throw SingularSystemError("condition_number: singular matrix");
  auto inv = std::make_shared<Eigen::MatrixXd>(lu.inverse());
  const double norm_a_sq = a_mat.squaredNorm();
  const double norm_m_sq = inv->squaredNorm();
  const double kappa = std::sqrt(norm_a_sq * norm_m_sq);

  NodeId out = push(Value::scalar(kappa), tracked(a), nullptr);
  nodes_[out].backprop = [out, a, inv, n, norm_a_sq, norm_m_sq](Tape& t) {
    if (!t.tracked(a)) return;
    const double g = t.grad(out)[0];
    const double norm_a = std::sqrt(norm_a_sq);
    const double norm_m = std::sqrt(norm_m_sq);
    const Eigen::MatrixXd a_now = t.value(a).to_matrix();
    MapRow ag(t.grad_buffer(a).data(), static_cast<Eigen::Index>(n),
              static_cast<Eigen::Index>(n));
    // d kappa / dA = (||M||/||A||) A - (||A||/||M||) M^T M M^T,  M = A^{-1}
    ag.noalias() += (g * (norm_m / norm_a)) * a_now;
    ag.noalias() -= (g * (norm_a / norm_m)) *
                    (inv->transpose() * (*inv) * inv->transpose());
  };
  return out;
}

NodeId Tape::mse_against(NodeId x, const Eigen::VectorXd& target) {
  const Value& xv = value(x);
  if (xv.data.size() != target.size())
    throw DimensionMismatchError("mse_against: size mismatch");
  const Eigen::Index count = target.size();
  if (count == 0) throw InvalidArgumentError("mse_against: empty input");

  double num = 0.0;
  for (Eigen::Index i = 0; i < count; ++i) {
    const double diff = xv.data[i] - target[i];
    num += diff * diff;
  }
  const double mse = num / static_cast<double>(count);

  auto tgt = std::make_shared<Eigen::VectorXd>(target);
  NodeId out = push(Value::scalar(mse), tracked(x), nullptr);
  nodes_[out].backprop = [out, x, tgt, count](Tape& t) {
    if (!t.tracked(x)) return;
    const double g = t.grad(out)[0];
    const double factor = g * 2.0 / static_cast<double>(count);
    t.grad_buffer(x) += factor * (t.value(x).data - *tgt);
  };
  return out;
}

// --- Generic ops -------------------------------------------------------------

NodeId Tape::add(NodeId a, NodeId b) { return scale_add(a, b, 1.0); }

NodeId Tape::scale_add(NodeId a, NodeId b, double beta) {
  const Value& av = value(a);
  const Value& bv = value(b);
  if (av.data.size() != bv.data.size())
    throw DimensionMismatchError("scale_add: size mismatch");
  Eigen::VectorXd flat = av.data + beta * bv.data;
  const bool track = tracked(a) || tracked(b);
  NodeId out = push(Value(av.dims, std::move(flat)), track, nullptr);
  nodes_[out].backprop = [out, a, b, beta](Tape& t) {
    const Eigen::VectorXd& g = t.grad(out);
    if (t.tracked(a)) t.grad_buffer(a) += g;
    if (t.tracked(b)) t.grad_buffer(b) += beta * g;
  };
  return out;
}

NodeId Tape::multiply(NodeId a, NodeId b) {
  const Value& av = value(a);
  const Value& bv = value(b);
  if (av.data.size() != bv.data.size())
    throw DimensionMismatchError("multiply: size mismatch");
  Eigen::VectorXd flat = av.data.cwiseProduct(bv.data);
  const bool track = tracked(a) || tracked(b);
  NodeId out = push(Value(av.dims, std::move(flat)), track, nullptr);
  nodes_[out].backprop = [out, a, b](Tape& t) {
    const Eigen::VectorXd& g = t.grad(out);
    if (t.tracked(a))
      t.grad_buffer(a).array() += g.array() * t.value(b).data.array();
    if (t.tracked(b))
      t.grad_buffer(b).array() += g.array() * t.value(a).data.array();
  };
  return out;
}

NodeId Tape::sum(NodeId x) {
  NodeId out = push(Value::scalar(value(x).data.sum()), tracked(x), nullptr);
  nodes_[out].backprop = [out, x](Tape& t) {
    if (t.tracked(x)) t.grad_buffer(x).array() += t.grad(out)[0];
  };
  return out;
}

NodeId Tape::sum_squares(NodeId x) {
  NodeId out =
      push(Value::scalar(value(x).data.squaredNorm()), tracked(x), nullptr);
  nodes_[out].backprop = [out, x](Tape& t) {
    if (t.tracked(x))
      t.grad_buffer(x) += (2.0 * t.grad(out)[0]) * t.value(x).data;
  };
  return out;
}

}  // namespace morphoscope::ad
