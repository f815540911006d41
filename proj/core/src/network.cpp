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

#include "morphoscope/network.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "morphoscope/errors.hpp"
#include "morphoscope/rng.hpp"

namespace morphoscope {

namespace {

std::size_t strided_extent(std::size_t n, int stride) {
  return (n - 1) / static_cast<std::size_t>(stride) + 1;
}

void validate_arch(const ArchSpec& arch) {
  const std::size_t d = arch.input_dims.size();
  if (d != 2 && d != 3)
    throw InvalidArgumentError("arch: input rank must be 2 or 3");
  for (std::size_t n : arch.input_dims)
    if (n < 2) throw InvalidArgumentError("arch: input extent must be >= 2");
  if (arch.convs.empty())
    throw InvalidArgumentError("arch: need at least one conv layer");
  for (const ConvLayer& c : arch.convs) {
    if (c.out_channels == 0)
      throw InvalidArgumentError("arch: conv needs out_channels > 0");
    if (c.stride != 1 && c.stride != 2)
      throw InvalidArgumentError("arch: conv stride must be 1 or 2");
  }
  if (arch.hidden == 0)
    throw InvalidArgumentError("arch: hidden width must be > 0");
  if (arch.learned_landmarks == 0)
    throw InvalidArgumentError("arch: need at least one learned landmark");
  if (arch.anchors.size() > 0 &&
      arch.anchors.cols() != static_cast<Eigen::Index>(d))
    throw DimensionMismatchError("arch: anchor dimension mismatch");
}

}  // namespace

ArchSpec ArchSpec::standard(const std::vector<std::size_t>& input_dims,
                            std::size_t learned_landmarks,
                            const LandmarkSet& anchors) {
  ArchSpec arch;
  arch.input_dims = input_dims;
  arch.learned_landmarks = learned_landmarks;
  arch.anchors = anchors;
  if (input_dims.size() == 2) {
    arch.convs = {{8, 2}, {16, 2}, {32, 2}, {64, 2}};
    arch.hidden = 256;
  } else {
    arch.convs = {{4, 2}, {8, 2}, {16, 2}, {32, 2}};
    arch.hidden = 128;
  }
  validate_arch(arch);
  return arch;
}

std::vector<std::size_t> trunk_output_dims(const ArchSpec& arch) {
  std::vector<std::size_t> dims(arch.input_dims.size() + 1);
  dims[0] = 1;
  for (std::size_t a = 0; a < arch.input_dims.size(); ++a)
    dims[a + 1] = arch.input_dims[a];
  for (const ConvLayer& c : arch.convs) {
    dims[0] = c.out_channels;
    for (std::size_t a = 1; a < dims.size(); ++a) {
      if (dims[a] < 2)
        throw InvalidArgumentError(
            "arch: conv trunk shrinks an axis below 2; too many strided "
            "layers for this input size");
      dims[a] = strided_extent(dims[a], c.stride);
    }
  }
  return dims;
}

NetParams init_params(const ArchSpec& arch, std::uint64_t seed) {
  validate_arch(arch);
  const std::size_t d = arch.input_dims.size();
  const std::size_t kvol = d == 2 ? 9 : 27;

  NetParams p;
  p.arch = arch;
  std::size_t c_in = 1;
  for (std::size_t i = 0; i < arch.convs.size(); ++i) {
    const std::size_t c_out = arch.convs[i].out_channels;
    ParamTensor kernel;
    kernel.name = "conv" + std::to_string(i) + "_kernel";
    kernel.dims = {c_out, c_in, 3, 3};
    if (d == 3) kernel.dims.push_back(3);
    kernel.data.resize(static_cast<Eigen::Index>(c_out * c_in * kvol));
    p.tensors.push_back(std::move(kernel));

    ParamTensor bias;
    bias.name = "conv" + std::to_string(i) + "_bias";
    bias.dims = {c_out};
    bias.data = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c_out));
    p.tensors.push_back(std::move(bias));
    c_in = c_out;
  }

  const std::vector<std::size_t> trunk = trunk_output_dims(arch);
  const std::size_t flat = ImageTensor::element_count(trunk);
  const std::size_t head_out = arch.learned_landmarks * d;

  ParamTensor w0{"dense0_weights",
                 {arch.hidden, flat},
                 Eigen::VectorXd(static_cast<Eigen::Index>(arch.hidden * flat))};
  ParamTensor b0{"dense0_bias",
                 {arch.hidden},
                 Eigen::VectorXd::Zero(static_cast<Eigen::Index>(arch.hidden))};
  ParamTensor w1{"dense1_weights",
                 {head_out, arch.hidden},
                 Eigen::VectorXd(
                     static_cast<Eigen::Index>(head_out * arch.hidden))};
  ParamTensor b1{"dense1_bias",
                 {head_out},
                 Eigen::VectorXd::Zero(static_cast<Eigen::Index>(head_out))};
  p.tensors.push_back(std::move(w0));
  p.tensors.push_back(std::move(b0));
  p.tensors.push_back(std::move(w1));
  p.tensors.push_back(std::move(b1));

  // Fill weight tensors in order; biases stay zero and consume no draws.
  Rng rng(seed);
  for (ParamTensor& t : p.tensors) {
    if (t.name.find("bias") != std::string::npos) continue;
    std::size_t fan_in = 1;
    for (std::size_t a = 1; a < t.dims.size(); ++a) fan_in *= t.dims[a];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < t.data.size(); ++i)
      t.data[i] = rng.next_uniform(-bound, bound);
  }
  return p;
}

std::vector<ad::NodeId> bind_trainable(ad::Tape& tape, const NetParams& p) {
  std::vector<ad::NodeId> ids;
  ids.reserve(p.tensors.size());
  for (const ParamTensor& t : p.tensors)
    ids.push_back(tape.leaf(ad::Value(t.dims, t.data)));
  return ids;
}

std::vector<ad::NodeId> bind_frozen(ad::Tape& tape, const NetParams& p) {
  std::vector<ad::NodeId> ids;
  ids.reserve(p.tensors.size());
  for (const ParamTensor& t : p.tensors)
    ids.push_back(tape.constant(ad::Value(t.dims, t.data)));
  return ids;
}

ad::NodeId landmarks_on_tape(ad::Tape& tape, const ArchSpec& arch,
                             const std::vector<ad::NodeId>& params,
                             const ImageTensor& image) {
  validate_arch(arch);
  if (image.dims != arch.input_dims)
    throw DimensionMismatchError(
        "landmarks_on_tape: image shape does not match architecture input");
  if (params.size() != 2 * arch.convs.size() + 4)
    throw InvalidArgumentError("landmarks_on_tape: parameter count mismatch");
  const std::size_t d = arch.input_dims.size();

  std::vector<std::size_t> in_dims(d + 1);
  in_dims[0] = 1;
  for (std::size_t a = 0; a < d; ++a) in_dims[a + 1] = arch.input_dims[a];
  Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(
      image.data.data(), static_cast<Eigen::Index>(image.data.size()));
  ad::NodeId x = tape.constant(ad::Value(in_dims, std::move(flat)));

  for (std::size_t i = 0; i < arch.convs.size(); ++i)
    x = tape.relu(
        tape.conv(x, params[2 * i], params[2 * i + 1], arch.convs[i].stride));

  const std::size_t base = 2 * arch.convs.size();
  x = tape.relu(tape.dense(x, params[base], params[base + 1]));
  x = tape.tanh_op(tape.dense(x, params[base + 2], params[base + 3]));
  x = tape.reshape(x, {arch.learned_landmarks, d});
  return tape.append_rows(x, arch.anchors);
}

LandmarkSet detect(const NetParams& params, const ImageTensor& image) {
  ad::Tape tape;
  const std::vector<ad::NodeId> ids = bind_frozen(tape, params);
  const ad::NodeId out = landmarks_on_tape(tape, params.arch, ids, image);
  return tape.value(out).to_matrix();
}

std::pair<LandmarkSet, LandmarkSet> detect_pair(const NetParams& params,
                                                const ImageTensor& a,
                                                const ImageTensor& b) {
  return {detect(params, a), detect(params, b)};
}

void save_checkpoint(const NetParams& params,
                     const std::filesystem::path& dir) {
  validate_arch(params.arch);
  std::filesystem::create_directories(dir);

  {
    std::ofstream arch(dir / "arch.txt");
    if (!arch) throw IoError("save_checkpoint: cannot write arch.txt");
    arch << "input";
    for (std::size_t n : params.arch.input_dims) arch << " " << n;
    arch << "\n";
    for (const ConvLayer& c : params.arch.convs)
      arch << "conv " << c.out_channels << " " << c.stride << "\n";
    arch << "hidden " << params.arch.hidden << "\n";
    arch << "landmarks " << params.arch.learned_landmarks << "\n";
    if (!arch) throw IoError("save_checkpoint: write failed for arch.txt");
  }

  save_landmarks(params.arch.anchors.size() > 0
                     ? params.arch.anchors
                     : LandmarkSet(0, params.arch.dim()),
                 dir / "anchors.txt");

  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("save_checkpoint: cannot write manifest.txt");
  for (const ParamTensor& t : params.tensors) {
    manifest << t.name;
    for (std::size_t n : t.dims) manifest << " " << n;
    manifest << "\n";
    ImageTensor img(t.dims,
                    std::vector<double>(t.data.data(),
                                        t.data.data() + t.data.size()));
    save_tensor(img, dir / (t.name + ".mst"));
  }
  if (!manifest) throw IoError("save_checkpoint: write failed for manifest");
}

NetParams load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream arch_in(dir / "arch.txt");
  if (!arch_in)
    throw IoError("load_checkpoint: cannot open " + (dir / "arch.txt").string());

  ArchSpec arch;
  std::string line;
  while (std::getline(arch_in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "input") {
      std::size_t n;
      while (ls >> n) arch.input_dims.push_back(n);
    } else if (tag == "conv") {
      ConvLayer c;
      if (!(ls >> c.out_channels >> c.stride))
        throw FormatError(FormatErrorCode::BadDims,
                          "load_checkpoint: malformed conv line");
      arch.convs.push_back(c);
    } else if (tag == "hidden") {
      if (!(ls >> arch.hidden))
        throw FormatError(FormatErrorCode::BadDims,
                          "load_checkpoint: malformed hidden line");
    } else if (tag == "landmarks") {
      if (!(ls >> arch.learned_landmarks))
        throw FormatError(FormatErrorCode::BadDims,
                          "load_checkpoint: malformed landmarks line");
    } else {
      throw FormatError(FormatErrorCode::UnsupportedFormat,
                        "load_checkpoint: unknown arch entry '" + tag + "'");
    }
  }
  arch.anchors = load_landmarks(dir / "anchors.txt");
  validate_arch(arch);

  NetParams p;
  p.arch = arch;
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest)
    throw IoError("load_checkpoint: cannot open " +
                  (dir / "manifest.txt").string());
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ParamTensor t;
    ls >> t.name;
    std::size_t n;
    while (ls >> n) t.dims.push_back(n);
    if (t.name.empty() || t.dims.empty())
      throw FormatError(FormatErrorCode::BadDims,
                        "load_checkpoint: malformed manifest line");
    const ImageTensor img = load_tensor(dir / (t.name + ".mst"));
    if (img.dims != t.dims)
      throw FormatError(FormatErrorCode::SizeMismatch,
                        "load_checkpoint: tensor shape disagrees with "
                        "manifest for " + t.name);
    t.data = Eigen::Map<const Eigen::VectorXd>(
        img.data.data(), static_cast<Eigen::Index>(img.data.size()));
    p.tensors.push_back(std::move(t));
  }

  // A checkpoint must carry exactly the tensors the architecture implies.
  const NetParams reference = init_params(arch, 0);
  if (p.tensors.size() != reference.tensors.size())
    throw FormatError(FormatErrorCode::SizeMismatch,
                      "load_checkpoint: parameter tensor count mismatch");
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    if (p.tensors[i].name != reference.tensors[i].name ||
        p.tensors[i].dims != reference.tensors[i].dims)
      throw FormatError(FormatErrorCode::SizeMismatch,
                        "load_checkpoint: unexpected tensor " +
                            p.tensors[i].name);
  }
  return p;
}

}  // namespace morphoscope
