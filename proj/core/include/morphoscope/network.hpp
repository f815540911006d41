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

#ifndef MORPHOSCOPE_NETWORK_HPP_
#define MORPHOSCOPE_NETWORK_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "morphoscope/autodiff.hpp"
#include "morphoscope/landmarks.hpp"
#include "morphoscope/tensor.hpp"

namespace morphoscope {

struct ConvLayer {
  std::size_t out_channels = 0;
  int stride = 1;
};

// Fully convolutional trunk (each conv followed by relu) into two dense
// layers; the head is squashed by tanh so predicted landmarks stay in the
// normalized cube [-1, 1]^d. Fixed anchor rows are appended after the
// learned ones and never receive gradient.
struct ArchSpec {
  std::vector<std::size_t> input_dims;  // image shape, rank 2 or 3
  std::vector<ConvLayer> convs;
  std::size_t hidden = 0;              // width of the first dense layer
  std::size_t learned_landmarks = 0;   // rows produced by the head
  LandmarkSet anchors;                 // fixed rows, shape {n_anchor, d}

  int dim() const { return static_cast<int>(input_dims.size()); }
  std::size_t anchor_count() const {
    return static_cast<std::size_t>(anchors.rows());
  }
  std::size_t total_landmarks() const {
    return learned_landmarks + anchor_count();
  }

  // Channel progression 8-16-32-64 with hidden width 256 for 2D inputs,
  // 4-8-16-32 with hidden width 128 for 3D; all convs use stride 2.
  static ArchSpec standard(const std::vector<std::size_t>& input_dims,
                           std::size_t learned_landmarks,
                           const LandmarkSet& anchors);
};

// Shape of the conv trunk output (channels first), and its element count.
std::vector<std::size_t> trunk_output_dims(const ArchSpec& arch);

struct ParamTensor {
  std::string name;
  std::vector<std::size_t> dims;
  Eigen::VectorXd data;  // flat, row-major
};

struct NetParams {
  ArchSpec arch;
  std::vector<ParamTensor> tensors;
};

// Weights drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases
// zero; the draw order is fixed by the tensor order, so a seed pins every
// coefficient.
NetParams init_params(const ArchSpec& arch, std::uint64_t seed);

// Tape bindings for the parameter tensors, in NetParams order.
std::vector<ad::NodeId> bind_trainable(ad::Tape& tape, const NetParams& p);
std::vector<ad::NodeId> bind_frozen(ad::Tape& tape, const NetParams& p);

// Runs the network on a (whitened, optionally noised) image already bound
// as graph input; returns the full landmark node, shape {K_total, d},
// learned rows first, anchors appended.
ad::NodeId landmarks_on_tape(ad::Tape& tape, const ArchSpec& arch,
                             const std::vector<ad::NodeId>& params,
                             const ImageTensor& image);

// Plain inference; runs the identical op sequence as the training forward
// pass (on a throwaway tape), so repeated calls are reproducible bit for
// bit.
LandmarkSet detect(const NetParams& params, const ImageTensor& image);

// Both halves of a siamese evaluation. The two slots share one set of
// weights, so detect_pair(p, x, x) always returns two identical sets.
std::pair<LandmarkSet, LandmarkSet> detect_pair(const NetParams& params,
                                                const ImageTensor& a,
                                                const ImageTensor& b);

// Checkpoint directory layout:
//   arch.txt      plain-text layer list
//   anchors.txt   anchor landmarks (text landmark format)
//   manifest.txt  one "name dim0 dim1 ..." line per parameter tensor
//   <name>.mst    tensor payload per parameter
void save_checkpoint(const NetParams& params,
                     const std::filesystem::path& dir);
NetParams load_checkpoint(const std::filesystem::path& dir);

}  // namespace morphoscope

#endif  // MORPHOSCOPE_NETWORK_HPP_
