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

#include "morphoscope/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "morphoscope/errors.hpp"
#include "morphoscope/format.hpp"
#include "morphoscope/parallel.hpp"
#include "morphoscope/rng.hpp"
#include "morphoscope/tps.hpp"

namespace morphoscope {

namespace {

// Seed-stream tags: 0x02 split, 0x03 init, 0x04 epoch pair order,
// 0x05 per-step noise (epoch, step, slot).
constexpr std::uint64_t kStreamSplit = 0x02;
constexpr std::uint64_t kStreamInit = 0x03;
constexpr std::uint64_t kStreamPairs = 0x04;
constexpr std::uint64_t kStreamNoise = 0x05;

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEpsilon = 1e-8;

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i-- > 1;) {
    const std::size_t j =
        static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(v[i], v[j]);
  }
}

template <typename T>
void shuffle_pairs(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i-- > 1;) {
    const std::size_t j =
        static_cast<std::size_t>(rng.next_below(static_cast<std::uint64_t>(i) + 1));
    std::swap(v[i], v[j]);
  }
}

Eigen::VectorXd flatten_image(const ImageTensor& img) {
  return Eigen::Map<const Eigen::VectorXd>(
      img.data.data(), static_cast<Eigen::Index>(img.data.size()));
}

struct AdamState {
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
  double beta1_power = 1.0;
  double beta2_power = 1.0;

  explicit AdamState(const NetParams& params) {
    m.reserve(params.tensors.size());
    v.reserve(params.tensors.size());
    for (const ParamTensor& t : params.tensors) {
      m.push_back(Eigen::VectorXd::Zero(t.data.size()));
      v.push_back(Eigen::VectorXd::Zero(t.data.size()));
    }
  }

  void step(NetParams& params, const std::vector<Eigen::VectorXd>& grads,
            double lr) {
    beta1_power *= kAdamBeta1;
    beta2_power *= kAdamBeta2;
    const double bias1 = 1.0 - beta1_power;
    const double bias2 = 1.0 - beta2_power;
    for (std::size_t k = 0; k < params.tensors.size(); ++k) {
      const Eigen::VectorXd& g = grads[k];
      if (g.size() == 0) continue;  // no gradient reached this tensor
      m[k] = kAdamBeta1 * m[k] + (1.0 - kAdamBeta1) * g;
      v[k].array() =
          kAdamBeta2 * v[k].array() + (1.0 - kAdamBeta2) * g.array().square();
      params.tensors[k].data.array() -=
          lr * (m[k].array() / bias1) /
          ((v[k].array() / bias2).sqrt() + kAdamEpsilon);
    }
  }
};

}  // namespace

TrainConfig parse_train_config(const std::string& json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      std::string("config: not valid JSON: ") + e.what());
  }
  if (!doc.is_object())
    throw FormatError(FormatErrorCode::UnsupportedFormat,
                      "config: top level must be a JSON object");

  TrainConfig cfg;
  for (const auto& [key, value] : doc.items()) {
    try {
      if (key == "dims") {
        cfg.dims = value.get<std::vector<std::size_t>>();
      } else if (key == "landmarks") {
        cfg.landmarks = value.get<std::size_t>();
      } else if (key == "anchors") {
        cfg.anchors = value.get<std::string>();
      } else if (key == "lambda") {
        cfg.lambda = value.get<double>();
      } else if (key == "epochs") {
        cfg.epochs = value.get<std::size_t>();
      } else if (key == "learning_rate") {
        cfg.learning_rate = value.get<double>();
      } else if (key == "noise_sigma") {
        cfg.noise_sigma = value.get<double>();
      } else if (key == "pair_strategy") {
        cfg.pair_strategy = value.get<std::string>();
      } else if (key == "pair_count") {
        cfg.pair_count = value.get<std::size_t>();
      } else if (key == "train_fraction") {
        cfg.train_fraction = value.get<double>();
      } else if (key == "val_fraction") {
        cfg.val_fraction = value.get<double>();
      } else if (key == "seed") {
        cfg.seed = value.get<std::uint64_t>();
      } else if (key == "hidden") {
        cfg.hidden = value.get<std::size_t>();
      } else if (key == "convs") {
        cfg.convs.clear();
        for (const nlohmann::json& layer : value) {
          if (!layer.is_array() || layer.size() != 2)
            throw FormatError(
                FormatErrorCode::UnsupportedFormat,
                "config: each convs entry must be [out_channels, stride]");
          cfg.convs.push_back(
              {layer[0].get<std::size_t>(), layer[1].get<int>()});
        }
      } else {
        throw FormatError(FormatErrorCode::UnsupportedFormat,
                          "config: unknown key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(FormatErrorCode::UnsupportedFormat,
                        "config: bad value for key '" + key + "': " + e.what());
    }
  }
  validate_train_config(cfg);
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return parse_train_config(text);
}

void validate_train_config(const TrainConfig& cfg) {
  if (cfg.dims.size() != 2 && cfg.dims.size() != 3)
    throw InvalidArgumentError("config: dims rank must be 2 or 3");
  for (std::size_t n : cfg.dims)
    if (n < 2) throw InvalidArgumentError("config: image extent must be >= 2");
  if (cfg.landmarks == 0)
    throw InvalidArgumentError("config: landmarks must be >= 1");
  if (cfg.anchors != "corners" && cfg.anchors != "none")
    throw InvalidArgumentError("config: anchors must be 'corners' or 'none'");
  if (!(cfg.lambda >= 0.0))
    throw InvalidArgumentError("config: lambda must be >= 0");
  if (cfg.epochs == 0)
    throw InvalidArgumentError("config: epochs must be >= 1");
  if (!(cfg.learning_rate > 0.0))
    throw InvalidArgumentError("config: learning_rate must be > 0");
  if (!(cfg.noise_sigma >= 0.0))
    throw InvalidArgumentError("config: noise_sigma must be >= 0");
  if (cfg.pair_strategy != "all" && cfg.pair_strategy != "random")
    throw InvalidArgumentError(
        "config: pair_strategy must be 'all' or 'random'");
  if (cfg.pair_strategy == "random" && cfg.pair_count == 0)
    throw InvalidArgumentError(
        "config: pair_count must be >= 1 with the random pair strategy");
  if (!(cfg.train_fraction > 0.0) || !(cfg.val_fraction >= 0.0) ||
      cfg.train_fraction + cfg.val_fraction > 1.0 + 1e-12)
    throw InvalidArgumentError("config: split fractions must be positive and "
                               "sum to at most 1");
}

ArchSpec arch_from_config(const TrainConfig& cfg) {
  validate_train_config(cfg);
  const int d = static_cast<int>(cfg.dims.size());
  const LandmarkSet anchors =
      cfg.anchors == "corners" ? corner_landmarks(d) : LandmarkSet(0, d);
  ArchSpec arch = ArchSpec::standard(cfg.dims, cfg.landmarks, anchors);
  if (!cfg.convs.empty()) arch.convs = cfg.convs;
  if (cfg.hidden != 0) arch.hidden = cfg.hidden;
  return arch;
}

SplitIndices make_split(std::size_t count, double train_fraction,
                        double val_fraction, std::uint64_t seed) {
  if (count == 0) throw InvalidArgumentError("make_split: empty input");
  if (!(train_fraction > 0.0) || !(val_fraction >= 0.0) ||
      train_fraction + val_fraction > 1.0 + 1e-12)
    throw InvalidArgumentError("make_split: bad fractions");

  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  shuffle_indices(order, rng);

  const double n = static_cast<double>(count);
  std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * n));
  std::size_t n_test = static_cast<std::size_t>(
      std::llround((1.0 - train_fraction - val_fraction) * n));
  if (n_val + n_test >= count) {  // remainders always go to train
    n_val = std::min(n_val, count - 1);
    n_test = std::min(n_test, count - 1 - n_val);
  }
  const std::size_t n_train = count - n_val - n_test;

  SplitIndices split;
  split.train.assign(order.begin(), order.begin() + n_train);
  split.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  split.test.assign(order.begin() + n_train + n_val, order.end());
  return split;
}

PairList pair_sequence(const std::vector<std::size_t>& subset,
                       const std::string& strategy, std::size_t pair_count,
                       std::uint64_t seed) {
  if (subset.size() < 2)
    throw InvalidArgumentError("pair_sequence: need at least 2 images");
  const std::size_t n = subset.size();
  Rng rng(seed);
  PairList pairs;
  if (strategy == "all") {
    pairs.reserve(n * (n - 1));
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (a != b) pairs.emplace_back(subset[a], subset[b]);
    shuffle_pairs(pairs, rng);
  } else if (strategy == "random") {
    if (pair_count == 0)
      throw InvalidArgumentError(
          "pair_sequence: random strategy needs pair_count >= 1");
    pairs.reserve(pair_count);
    for (std::size_t s = 0; s < pair_count; ++s) {
      const std::size_t a = static_cast<std::size_t>(rng.next_below(n));
      std::size_t b = static_cast<std::size_t>(rng.next_below(n - 1));
      if (b >= a) ++b;
      pairs.emplace_back(subset[a], subset[b]);
    }
  } else {
    throw InvalidArgumentError("pair_sequence: unknown strategy '" + strategy +
                               "'");
  }
  return pairs;
}

PairLossNodes pair_loss_on_tape(ad::Tape& tape, const ArchSpec& arch,
                                const std::vector<ad::NodeId>& params,
                                const ImageTensor& noisy_target,
                                const ImageTensor& noisy_source,
                                const ImageTensor& clean_target,
                                const ImageTensor& clean_source,
                                double lambda, const Eigen::MatrixXd& grid) {
  if (clean_target.dims != arch.input_dims ||
      clean_source.dims != arch.input_dims)
    throw DimensionMismatchError(
        "pair_loss_on_tape: image shape does not match architecture");
  if (grid.rows() !=
          static_cast<Eigen::Index>(ImageTensor::element_count(arch.input_dims)) ||
      grid.cols() != static_cast<Eigen::Index>(arch.input_dims.size()))
    throw DimensionMismatchError("pair_loss_on_tape: grid shape mismatch");

  const ad::NodeId l_target = landmarks_on_tape(tape, arch, params, noisy_target);
  const ad::NodeId l_source = landmarks_on_tape(tape, arch, params, noisy_source);
  const ad::NodeId system = tape.tps_system(l_target);
  const ad::NodeId rhs = tape.tps_rhs(l_source);
  const ad::NodeId weights = tape.linear_solve(system, rhs);
  const ad::NodeId coords = tape.tps_evaluate(weights, l_target, grid);
  const ad::NodeId sampled = tape.image_sample(clean_source, coords);
  const ad::NodeId match =
      tape.mse_against(sampled, flatten_image(clean_target));
  const ad::NodeId reg = tape.condition_number(system);
  const ad::NodeId total = tape.scale_add(match, reg, lambda);
  return PairLossNodes{total, match, reg};
}

LossBreakdown loss_forward(const NetParams& params, const ImageTensor& source,
                           const ImageTensor& target, double lambda) {
  ad::Tape tape;
  const std::vector<ad::NodeId> ids = bind_frozen(tape, params);
  const Eigen::MatrixXd grid = grid_coordinates(params.arch.input_dims);
  const PairLossNodes nodes = pair_loss_on_tape(
      tape, params.arch, ids, target, source, target, source, lambda, grid);
  LossBreakdown out;
  out.total = tape.value(nodes.total).to_scalar();
  out.match = tape.value(nodes.match).to_scalar();
  out.reg = tape.value(nodes.reg).to_scalar();
  return out;
}

PairEvalSummary evaluate_pairs(const NetParams& params,
                               const std::vector<ImageTensor>& whitened,
                               const std::vector<std::size_t>& subset,
                               double lambda) {
  PairEvalSummary summary;
  if (subset.size() < 2) return summary;

  // One detection per image, then plain forward registration per pair.
  std::vector<LandmarkSet> detected(subset.size());
  parallel_for(subset.size(), [&](std::size_t i) {
    detected[i] = detect(params, whitened.at(subset[i]));
  });

  PairList pairs;
  for (std::size_t a = 0; a < subset.size(); ++a)
    for (std::size_t b = 0; b < subset.size(); ++b)
      if (a != b) pairs.emplace_back(a, b);

  struct PairOutcome {
    double total = 0.0, match = 0.0, reg = 0.0, relative = 0.0;
    bool ok = false;
  };
  std::vector<PairOutcome> outcomes(pairs.size());
  parallel_for(pairs.size(), [&](std::size_t p) {
    const auto [a, b] = pairs[p];
    try {
      TpsModel model = assemble(detected[b], detected[a]);
      solve(model);
      const ImageTensor& target = whitened.at(subset[b]);
      const ImageTensor warped =
          warp(model, whitened.at(subset[a]), target.dims);
      const RegistrationLoss loss = registration_loss(warped, target);
      PairOutcome& out = outcomes[p];
      out.reg = condition_frobenius(model.A);
      out.match = loss.mse;
      out.total = loss.mse + lambda * out.reg;
      out.relative = loss.relative;
      out.ok = true;
    } catch (const SingularSystemError&) {
      // counted below in fixed order
    }
  });

  for (const PairOutcome& out : outcomes) {
    if (!out.ok) {
      ++summary.skipped;
      continue;
    }
    summary.mean_total += out.total;
    summary.mean_match += out.match;
    summary.mean_reg += out.reg;
    summary.mean_relative += out.relative;
    ++summary.pairs_used;
  }
  if (summary.pairs_used > 0) {
    const double n = static_cast<double>(summary.pairs_used);
    summary.mean_total /= n;
    summary.mean_match /= n;
    summary.mean_reg /= n;
    summary.mean_relative /= n;
  }
  return summary;
}

void write_train_log(const std::vector<EpochLog>& log,
                     const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("write_train_log: cannot open " + path.string());
  out << "epoch,mean_total,mean_match,mean_reg,val_total,skipped_steps\n";
  for (const EpochLog& row : log) {
    out << row.epoch << ',' << format_double(row.mean_total) << ','
        << format_double(row.mean_match) << ',' << format_double(row.mean_reg)
        << ',' << format_double(row.val_total) << ',' << row.skipped_steps
        << '\n';
  }
  if (!out) throw IoError("write_train_log: write failed for " + path.string());
}

TrainResult train(const Dataset& data, const TrainConfig& cfg,
                  const std::filesystem::path& out_dir,
                  std::ostream* progress) {
  validate_train_config(cfg);
  if (data.images.empty()) throw InvalidArgumentError("train: empty dataset");
  if (data.dims != cfg.dims)
    throw DimensionMismatchError(
        "train: dataset shape does not match config dims");

  std::vector<ImageTensor> whitened;
  whitened.reserve(data.images.size());
  for (const ImageTensor& img : data.images) whitened.push_back(whiten(img));

  const SplitIndices split =
      make_split(data.images.size(), cfg.train_fraction, cfg.val_fraction,
                 derive_seed(cfg.seed, {kStreamSplit}));
  if (split.train.size() < 2)
    throw InvalidArgumentError("train: training split needs >= 2 images");

  const ArchSpec arch = arch_from_config(cfg);
  NetParams params = init_params(arch, derive_seed(cfg.seed, {kStreamInit}));
  AdamState adam(params);
  const Eigen::MatrixXd grid = grid_coordinates(cfg.dims);

  std::vector<Eigen::VectorXd> flat_clean;
  flat_clean.reserve(whitened.size());
  for (const ImageTensor& img : whitened)
    flat_clean.push_back(flatten_image(img));

  std::filesystem::create_directories(out_dir / "checkpoints");
  TrainResult result;
  result.split = split;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const PairList pairs =
        pair_sequence(split.train, cfg.pair_strategy, cfg.pair_count,
                      derive_seed(cfg.seed, {kStreamPairs, epoch}));

    double sum_total = 0.0, sum_match = 0.0, sum_reg = 0.0;
    std::size_t applied = 0, skipped = 0;
    std::vector<Eigen::VectorXd> grads(params.tensors.size());

    for (std::size_t s = 0; s < pairs.size(); ++s) {
      const auto [src, tgt] = pairs[s];
      const ImageTensor noisy_src = add_gaussian_noise(
          whitened[src], cfg.noise_sigma,
          derive_seed(cfg.seed, {kStreamNoise, epoch, s, 0}));
      const ImageTensor noisy_tgt = add_gaussian_noise(
          whitened[tgt], cfg.noise_sigma,
          derive_seed(cfg.seed, {kStreamNoise, epoch, s, 1}));

      ad::Tape tape;
      const std::vector<ad::NodeId> ids = bind_trainable(tape, params);
      PairLossNodes nodes;
      try {
        nodes = pair_loss_on_tape(tape, arch, ids, noisy_tgt, noisy_src,
                                  whitened[tgt], whitened[src], cfg.lambda,
                                  grid);
      } catch (const SingularSystemError&) {
        ++skipped;
        continue;
      }

      const double total = tape.value(nodes.total).to_scalar();
      if (!std::isfinite(total))
        throw Error("train: non-finite loss at epoch " +
                    std::to_string(epoch) + " step " + std::to_string(s));
      sum_total += total;
      sum_match += tape.value(nodes.match).to_scalar();
      sum_reg += tape.value(nodes.reg).to_scalar();
      ++applied;

      tape.backward(nodes.total);
      for (std::size_t k = 0; k < ids.size(); ++k) grads[k] = tape.grad(ids[k]);
      adam.step(params, grads, cfg.learning_rate);
    }

    EpochLog row;
    row.epoch = epoch;
    const double denom = applied > 0 ? static_cast<double>(applied) : 1.0;
    row.mean_total = sum_total / denom;
    row.mean_match = sum_match / denom;
    row.mean_reg = sum_reg / denom;
    row.val_total =
        evaluate_pairs(params, whitened, split.val, cfg.lambda).mean_total;
    row.skipped_steps = skipped;
    result.log.push_back(row);

    char name[32];
    std::snprintf(name, sizeof(name), "epoch_%03zu", epoch);
    save_checkpoint(params, out_dir / "checkpoints" / name);
    write_train_log(result.log, out_dir / "train_log.csv");

    if (progress) {
      (*progress) << "epoch " << epoch << "/" << cfg.epochs
                  << " mean_total=" << row.mean_total
                  << " mean_match=" << row.mean_match
                  << " mean_reg=" << row.mean_reg
                  << " val_total=" << row.val_total << " skipped=" << skipped
                  << std::endl;
    }
  }

  save_checkpoint(params, out_dir / "final");
  result.params = std::move(params);
  return result;
}

}  // namespace morphoscope
