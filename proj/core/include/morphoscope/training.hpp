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

#ifndef MORPHOSCOPE_TRAINING_HPP_
#define MORPHOSCOPE_TRAINING_HPP_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "morphoscope/autodiff.hpp"
#include "morphoscope/network.hpp"
#include "morphoscope/phantom.hpp"
#include "morphoscope/tensor.hpp"

namespace morphoscope {

// JSON keys match the field names below one to one; unknown keys are
// rejected by name. `convs` (arrays of [out_channels, stride]) and `hidden`
// override the per-rank standard architecture when present.
struct TrainConfig {
  std::vector<std::size_t> dims = {64, 64};
  std::size_t landmarks = 30;       // learned landmarks K
  std::string anchors = "corners";  // "corners" | "none"
  double lambda = 1e-4;
  std::size_t epochs = 20;
  double learning_rate = 1e-4;
  double noise_sigma = 0.05;
  std::string pair_strategy = "all";  // "all" | "random"
  std::size_t pair_count = 0;         // pairs per epoch, "random" only
  double train_fraction = 0.8;
  double val_fraction = 0.1;  // remainder of the split is the test set
  std::uint64_t seed = 0;
  std::vector<ConvLayer> convs;  // empty = standard for the input rank
  std::size_t hidden = 0;        // 0 = standard for the input rank
};

TrainConfig parse_train_config(const std::string& json_text);
TrainConfig load_train_config(const std::filesystem::path& path);
void validate_train_config(const TrainConfig& cfg);

// Architecture a config describes (standard trunk unless overridden).
ArchSpec arch_from_config(const TrainConfig& cfg);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Deterministic shuffle, then partition; rounding remainders go to train.
SplitIndices make_split(std::size_t count, double train_fraction,
                        double val_fraction, std::uint64_t seed);

using PairList = std::vector<std::pair<std::size_t, std::size_t>>;

// "all": every ordered pair (i != j) of `subset` in a seeded shuffle;
// "random": `pair_count` ordered pairs drawn uniformly (i != j).
PairList pair_sequence(const std::vector<std::size_t>& subset,
                       const std::string& strategy, std::size_t pair_count,
                       std::uint64_t seed);

struct LossBreakdown {
  double total = 0.0;
  double match = 0.0;
  double reg = 0.0;
};

struct PairLossNodes {
  ad::NodeId total;
  ad::NodeId match;
  ad::NodeId reg;
};

// Differentiable siamese registration loss for one ordered pair:
// network(noisy target) -> l_T, network(noisy source) -> l_S, spline solve,
// source resampled over the target grid, MSE against the clean target plus
// lambda times the system condition number. Throws SingularSystemError when
// the spline system is singular (the caller skips such steps).
PairLossNodes pair_loss_on_tape(ad::Tape& tape, const ArchSpec& arch,
                                const std::vector<ad::NodeId>& params,
                                const ImageTensor& noisy_target,
                                const ImageTensor& noisy_source,
                                const ImageTensor& clean_target,
                                const ImageTensor& clean_source,
                                double lambda, const Eigen::MatrixXd& grid);

// Noise-free loss of one ordered pair; images must already be whitened.
LossBreakdown loss_forward(const NetParams& params, const ImageTensor& source,
                           const ImageTensor& target, double lambda);

// Mean losses over all ordered pairs of `subset` (noise-free, forward
// solves only). Landmarks are detected once per image; singular pairs are
// skipped and counted. `mean_relative` is the mean of
// ||I_R - I_T||^2 / ||I_T||^2 over the evaluated pairs.
struct PairEvalSummary {
  double mean_total = 0.0;
  double mean_match = 0.0;
  double mean_reg = 0.0;
  double mean_relative = 0.0;
  std::size_t pairs_used = 0;
  std::size_t skipped = 0;
};

PairEvalSummary evaluate_pairs(const NetParams& params,
                               const std::vector<ImageTensor>& whitened,
                               const std::vector<std::size_t>& subset,
                               double lambda);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_total = 0.0;
  double mean_match = 0.0;
  double mean_reg = 0.0;
  double val_total = 0.0;
  std::size_t skipped_steps = 0;
};

// CSV with header epoch,mean_total,mean_match,mean_reg,val_total,
// skipped_steps; doubles in shortest round-trip form.
void write_train_log(const std::vector<EpochLog>& log,
                     const std::filesystem::path& path);

struct TrainResult {
  NetParams params;
  std::vector<EpochLog> log;
  SplitIndices split;  // the train/val/test indices the run used
};

// Whitens the cohort, splits it, and runs epochs x pairs Adam steps (batch
// size 1). Singular steps are skipped and counted; a non-finite loss
// aborts. Writes per-epoch checkpoints under out_dir/checkpoints/, the
// final model under out_dir/final/, and out_dir/train_log.csv. `progress`
// (optional) receives one line per epoch.
TrainResult train(const Dataset& data, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir,
                  std::ostream* progress = nullptr);

}  // namespace morphoscope

#endif  // MORPHOSCOPE_TRAINING_HPP_
