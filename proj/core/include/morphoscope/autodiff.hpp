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

#ifndef MORPHOSCOPE_AUTODIFF_HPP_
#define MORPHOSCOPE_AUTODIFF_HPP_

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "morphoscope/tensor.hpp"

namespace morphoscope::ad {

using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Dense value on the tape: a shape plus a flat row-major buffer.
struct Value {
  std::vector<std::size_t> dims;
  Eigen::VectorXd data;

  Value() = default;
  Value(std::vector<std::size_t> shape, Eigen::VectorXd flat);

  static Value scalar(double x);
  static Value from_matrix(const Eigen::MatrixXd& m);
  static Value from_vector(const Eigen::VectorXd& v);
  static Value from_image(const ImageTensor& img);

  std::size_t element_count() const;
  std::size_t rank() const { return dims.size(); }
  // Views the flat buffer as a rows x cols row-major matrix; requires a
  // matching element count.
  Eigen::Map<const RowMatrixXd> as_matrix(std::size_t rows,
                                          std::size_t cols) const;
  Eigen::MatrixXd to_matrix() const;  // rank-2 values only
  double to_scalar() const;           // single-element values only
};

using NodeId = std::uint32_t;

// Reverse-mode tape. Nodes are appended by the op builders below; backward()
// sweeps them in strict reverse creation order, so gradients are
// reproducible bit for bit across repeated passes.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Tracked input: participates in differentiation.
  NodeId leaf(Value v);
  // Untracked input: treated as a constant, receives no gradient.
  NodeId constant(Value v);

  // --- network ops ---------------------------------------------------------
  // Cross-correlation with zero padding 1 and odd cubic kernels (3^d taps).
  // input dims {C_in, spatial...} (2 or 3 spatial axes), kernel dims
  // {C_out, C_in, 3, 3[, 3]}, bias dims {C_out}, stride in {1, 2}.
  NodeId conv(NodeId input, NodeId kernel, NodeId bias, int stride);
  // Fully connected layer: weights {m, n} applied to the flattened input of
  // size n, plus bias {m}.
  NodeId dense(NodeId input, NodeId weights, NodeId bias);
  NodeId relu(NodeId x);       // derivative at 0 is defined as 0
  NodeId tanh_op(NodeId x);
  NodeId reshape(NodeId x, std::vector<std::size_t> dims);
  // Stacks constant rows under a matrix-valued node; the constant block gets
  // no gradient. Used for appending anchor landmarks to network output.
  NodeId append_rows(NodeId matrix, const Eigen::MatrixXd& fixed);

  // --- registration ops ----------------------------------------------------
  // Builds the (K+d+1) square interpolation system from target landmarks.
  NodeId tps_system(NodeId targets);
  // Builds the right-hand side [source; zeros(d+1, d)] from source landmarks.
  NodeId tps_rhs(NodeId sources);
  // Solves A W = B by partially pivoted LU; throws SingularSystemError when
  // the factorization has a negligible pivot. Gradients use the implicit
  // relations B_bar = A^{-T} W_bar and A_bar = -(A^{-T} W_bar) W^T.
  NodeId linear_solve(NodeId a, NodeId b);
  // Applies the spline with weights W and kernel centers `targets` to a fixed
  // point list (M x d); result is the warped coordinates (M x d).
  NodeId tps_evaluate(NodeId weights, NodeId targets,
                      const Eigen::MatrixXd& points);
  // Multilinear interpolation of a constant image at M x d coordinates;
  // the gradient flows into the coordinates only. Outside the grid the
  // sampled value clamps to the border with zero slope.
  NodeId image_sample(const ImageTensor& image, NodeId coords);
  // Frobenius condition number ||A||_F ||A^{-1}||_F of a square node.
  NodeId condition_number(NodeId a);
  // Mean squared error of a node against a constant target of equal size.
  NodeId mse_against(NodeId x, const Eigen::VectorXd& target);

  // --- generic ops ---------------------------------------------------------
  NodeId add(NodeId a, NodeId b);                 // elementwise, equal shapes
  NodeId scale_add(NodeId a, NodeId b, double beta);  // a + beta * b
  NodeId multiply(NodeId a, NodeId b);            // elementwise, equal shapes
  NodeId sum(NodeId x);
  NodeId sum_squares(NodeId x);

  // Seeds the (scalar) root with 1 and accumulates vector-Jacobian products
  // in reverse creation order. Gradients from any earlier call are reset
  // first, so repeated calls yield identical results.
  void backward(NodeId root);

  const Value& value(NodeId id) const;
  // Flat gradient of a node after backward(); zero-sized before any call.
  const Eigen::VectorXd& grad(NodeId id) const;
  bool tracked(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Value value;
    Eigen::VectorXd grad;
    bool tracked = false;
    bool has_grad = false;  // grad buffer initialized during current sweep
    std::function<void(Tape&)> backprop;
  };

  NodeId push(Value v, bool tracked, std::function<void(Tape&)> backprop);
  Eigen::VectorXd& grad_buffer(NodeId id);
  void accumulate(NodeId id, const Eigen::VectorXd& g);

  std::vector<Node> nodes_;
};

}  // namespace morphoscope::ad

#endif  // MORPHOSCOPE_AUTODIFF_HPP_
