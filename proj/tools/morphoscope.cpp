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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "morphoscope/culling.hpp"
#include "morphoscope/errors.hpp"
#include "morphoscope/format.hpp"
#include "morphoscope/landmarks.hpp"
#include "morphoscope/network.hpp"
#include "morphoscope/phantom.hpp"
#include "morphoscope/shapestats.hpp"
#include "morphoscope/tensor.hpp"
#include "morphoscope/tps.hpp"
#include "morphoscope/training.hpp"

namespace ms = morphoscope;
namespace fs = std::filesystem;

namespace {

std::string sample_name(const char* prefix, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%s%04zu", prefix, i);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ms::IoError("cannot open " + path.string() + " for writing");
  return out;
}

ms::ShapeMatrix shapes_from_landmark_sets(
    const std::vector<ms::LandmarkSet>& sets,
    const std::vector<std::string>& ids,
    const std::vector<std::string>& labels) {
  if (sets.empty()) throw ms::InvalidArgumentError("no shapes to flatten");
  const Eigen::Index K = sets.front().rows();
  const Eigen::Index d = sets.front().cols();
  ms::ShapeMatrix shapes;
  shapes.dim = static_cast<int>(d);
  shapes.ids = ids;
  shapes.labels = labels;
  shapes.X.resize(static_cast<Eigen::Index>(sets.size()), K * d);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (sets[i].rows() != K || sets[i].cols() != d)
      throw ms::DimensionMismatchError("shape rows disagree across images");
    for (Eigen::Index j = 0; j < K; ++j)
      for (Eigen::Index a = 0; a < d; ++a)
        shapes.X(static_cast<Eigen::Index>(i), j * d + a) = sets[i](j, a);
  }
  return shapes;
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "phantom";
  fs::path out;
  std::size_t count = 100;
  double sigma = 0.05;
  std::size_t size = 64;
  std::uint64_t seed = 0;
};

void run_synth(const SynthArgs& args) {
  fs::create_directories(args.out);
  if (args.kind == "phantom") {
    ms::DatasetSpec spec;
    spec.dims = {args.size, args.size};
    spec.count = args.count;
    spec.sigma = args.sigma;
    spec.seed = args.seed;
    ms::make_dataset(spec, args.out);
    std::cout << "wrote " << args.count << " phantom images to "
              << args.out.string() << "\n";
  } else if (args.kind == "blob") {
    const std::vector<std::size_t> dims(3, args.size);
    const std::vector<double> center = {0.0, 0.0, 0.0};
    const double radius = 0.55;
    const double squash = 0.8;
    const ms::ImageTensor volume =
        ms::make_blob_volume(dims, center, radius, squash);
    ms::save_tensor(volume, args.out / "volume.mst");
    ms::save_landmarks(ms::blob_boundary_points(center, radius, squash, 3),
                       args.out / "boundary.txt");
    std::cout << "wrote blob volume and boundary landmarks to "
              << args.out.string() << "\n";
  } else {  // two-class
    const ms::TwoClassSet set =
        ms::make_two_class_set(args.count, {args.size, args.size}, 0.55, 1.0,
                               1.6, args.sigma, args.seed);
    std::vector<std::string> ids, labels;
    for (std::size_t i = 0; i < set.images.size(); ++i) {
      const std::string name = sample_name("img_", i);
      ms::save_tensor(set.images[i], args.out / (name + ".mst"));
      ids.push_back(name);
      labels.push_back(std::to_string(set.labels[i]));
    }
    ms::write_shape_matrix(
        shapes_from_landmark_sets(set.boundary_points, ids, labels),
        args.out / "shapes.csv");
    std::ofstream lf = open_out(args.out / "labels.csv");
    lf << "id,label\n";
    for (std::size_t i = 0; i < ids.size(); ++i)
      lf << ids[i] << ',' << labels[i] << '\n';
    std::cout << "wrote " << set.images.size() << " two-class images to "
              << args.out.string() << "\n";
  }
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  fs::path config;
  fs::path data;
  fs::path out;
  std::uint64_t seed = 0;
  double lambda = 0.0;
  std::size_t epochs = 0;
  std::size_t landmarks = 0;
  std::string anchors;
  bool quiet = false;
};

void write_eval_csv(const fs::path& path,
                    const ms::PairEvalSummary& val,
                    const ms::PairEvalSummary& test) {
  std::ofstream out = open_out(path);
  out << "subset,pairs,mean_total,mean_match,mean_reg,mean_relative,skipped\n";
  const auto row = [&out](const char* name, const ms::PairEvalSummary& s) {
    out << name << ',' << s.pairs_used << ','
        << ms::format_double(s.mean_total) << ','
        << ms::format_double(s.mean_match) << ','
        << ms::format_double(s.mean_reg) << ','
        << ms::format_double(s.mean_relative) << ',' << s.skipped << '\n';
  };
  row("val", val);
  row("test", test);
}

void run_train(const TrainArgs& args, bool seed_set, bool lambda_set,
               bool epochs_set, bool landmarks_set, bool anchors_set) {
  ms::TrainConfig cfg;
  if (!args.config.empty()) cfg = ms::load_train_config(args.config);
  if (seed_set) cfg.seed = args.seed;
  if (lambda_set) cfg.lambda = args.lambda;
  if (epochs_set) cfg.epochs = args.epochs;
  if (landmarks_set) cfg.landmarks = args.landmarks;
  if (anchors_set) cfg.anchors = args.anchors;
  ms::validate_train_config(cfg);

  const ms::Dataset data = ms::load_dataset(args.data);
  std::ostream* progress = args.quiet ? nullptr : &std::cout;
  const ms::TrainResult result = ms::train(data, cfg, args.out, progress);

  // Post-training evaluation on the held-out splits.
  std::vector<ms::ImageTensor> whitened;
  whitened.reserve(data.images.size());
  for (const ms::ImageTensor& img : data.images)
    whitened.push_back(ms::whiten(img));
  const ms::PairEvalSummary val =
      ms::evaluate_pairs(result.params, whitened, result.split.val, cfg.lambda);
  const ms::PairEvalSummary test = ms::evaluate_pairs(
      result.params, whitened, result.split.test, cfg.lambda);
  write_eval_csv(args.out / "eval.csv", val, test);

  // Full-cohort shape descriptors from the final model.
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < data.images.size(); ++i)
    ids.push_back(sample_name("img_", i));
  ms::write_shape_matrix(
      ms::build_shape_matrix(result.params, whitened, ids),
      args.out / "final" / "shapes.csv");

  if (!args.quiet) {
    std::cout << "final checkpoint: " << (args.out / "final").string() << "\n"
              << "test pairs " << test.pairs_used
              << " mean relative L2: " << test.mean_relative << "\n";
  }
}

// --- detect / register -------------------------------------------------------

void run_detect(const fs::path& checkpoint, const fs::path& image,
                const fs::path& out) {
  const ms::NetParams params = ms::load_checkpoint(checkpoint);
  const ms::ImageTensor img = ms::load_tensor(image);
  ms::save_landmarks(ms::detect(params, ms::whiten(img)), out);
}

void run_register(const fs::path& checkpoint, const fs::path& source,
                  const fs::path& target, const fs::path& out,
                  double lambda) {
  const ms::NetParams params = ms::load_checkpoint(checkpoint);
  const ms::ImageTensor src = ms::load_tensor(source);
  const ms::ImageTensor tgt = ms::load_tensor(target);
  const auto [l_src, l_tgt] =
      ms::detect_pair(params, ms::whiten(src), ms::whiten(tgt));

  ms::TpsModel model = ms::assemble(l_tgt, l_src);
  ms::solve(model);
  const ms::ImageTensor warped = ms::warp(model, src, tgt.dims);
  const ms::RegistrationLoss loss = ms::registration_loss(warped, tgt);
  const double kappa = ms::condition_frobenius(model.A);

  fs::create_directories(out);
  ms::save_tensor(warped, out / "warped.mst");
  ms::save_landmarks(l_src, out / "landmarks_source.txt");
  ms::save_landmarks(l_tgt, out / "landmarks_target.txt");
  std::ofstream report = open_out(out / "report.csv");
  report << "mse,relative,condition,total\n"
         << ms::format_double(loss.mse) << ','
         << ms::format_double(loss.relative) << ','
         << ms::format_double(kappa) << ','
         << ms::format_double(loss.mse + lambda * kappa) << '\n';
  std::cout << "relative L2: " << loss.relative << "\n";
}

// --- cull --------------------------------------------------------------------

void run_cull(const fs::path& checkpoint, const fs::path& data,
              const fs::path& out, double threshold, bool threshold_set,
              std::size_t pair_cap, std::uint64_t seed,
              const std::vector<std::size_t>& pinned) {
  const ms::NetParams params = ms::load_checkpoint(checkpoint);
  const ms::Dataset dataset = ms::load_dataset(data);
  std::vector<ms::ImageTensor> whitened;
  whitened.reserve(dataset.images.size());
  for (const ms::ImageTensor& img : dataset.images)
    whitened.push_back(ms::whiten(img));

  const ms::PairList pairs =
      ms::make_scoring_pairs(whitened.size(), pair_cap, seed);
  ms::RedundancyReport report =
      ms::score_landmarks(params, whitened, pairs);
  const double cut =
      threshold_set ? threshold : ms::default_cull_threshold(report);
  const std::vector<std::size_t> kept = ms::cull(report, cut, pinned);

  fs::create_directories(out);
  ms::write_redundancy_csv(report, out / "redundancy.csv");
  std::ofstream kf = open_out(out / "kept.txt");
  for (std::size_t k : kept) kf << k << '\n';
  std::cout << "threshold " << cut << ": kept " << kept.size() << " of "
            << report.importance.size() << " landmarks ("
            << report.pairs_used << " pairs scored)\n";
}

// --- stats -------------------------------------------------------------------

void run_stats_pca(const fs::path& shapes_path, const fs::path& out,
                   double variance) {
  const ms::ShapeMatrix shapes = ms::read_shape_matrix(shapes_path);
  fs::create_directories(out);

  const Eigen::MatrixXd embedding = ms::embed_2d(shapes.X);
  std::ofstream ef = open_out(out / "embedding.csv");
  ef << "id,label,e0,e1\n";
  for (Eigen::Index i = 0; i < embedding.rows(); ++i)
    ef << shapes.ids[static_cast<std::size_t>(i)] << ','
       << shapes.labels[static_cast<std::size_t>(i)] << ','
       << ms::format_double(embedding(i, 0)) << ','
       << ms::format_double(embedding(i, 1)) << '\n';

  const ms::PcaModel model = ms::fit_pca(shapes.X, variance);
  const double total = std::max(model.variances.sum(), 1e-300);
  std::ofstream vf = open_out(out / "variance.csv");
  vf << "component,variance,cumulative_fraction\n";
  double cum = 0.0;
  for (Eigen::Index j = 0; j < model.variances.size(); ++j) {
    cum += model.variances(j);
    vf << j << ',' << ms::format_double(model.variances(j)) << ','
       << ms::format_double(cum / total) << '\n';
  }
  std::cout << "retained " << model.retained << " components\n";
}

void run_stats_zscore(const fs::path& base_path, const fs::path& query_path,
                      const fs::path& out, double variance) {
  const ms::ShapeMatrix base = ms::read_shape_matrix(base_path);
  const ms::ShapeMatrix query =
      query_path.empty() ? base : ms::read_shape_matrix(query_path);
  const ms::ZScoreModel model = ms::fit_zscore(base.X, variance);
  const Eigen::VectorXd z = ms::zscores(model, query.X);

  fs::create_directories(out);
  std::ofstream zf = open_out(out / "zscores.csv");
  zf << "id,label,zscore\n";
  for (Eigen::Index i = 0; i < z.size(); ++i)
    zf << query.ids[static_cast<std::size_t>(i)] << ','
       << query.labels[static_cast<std::size_t>(i)] << ','
       << ms::format_double(z(i)) << '\n';
  std::cout << "scored " << z.size() << " shapes against a base cohort of "
            << base.X.rows() << " (m = " << model.pca.retained << ")\n";
}

void run_stats_cluster(const fs::path& shapes_path, std::size_t k,
                       std::uint64_t seed, const fs::path& assign_path,
                       const fs::path& out) {
  const ms::ShapeMatrix shapes = ms::read_shape_matrix(shapes_path);
  const ms::ClusterModel model = ms::spectral_cluster(shapes.X, k, seed);

  fs::create_directories(out);
  std::ofstream lf = open_out(out / "labels.csv");
  lf << "id,label,cluster\n";
  for (std::size_t i = 0; i < model.labels.size(); ++i)
    lf << shapes.ids[i] << ',' << shapes.labels[i] << ',' << model.labels[i]
       << '\n';

  if (!assign_path.empty()) {
    const ms::ShapeMatrix query = ms::read_shape_matrix(assign_path);
    const std::vector<int> assigned = ms::assign_clusters(model, query.X);
    std::ofstream af = open_out(out / "assignments.csv");
    af << "id,label,cluster\n";
    for (std::size_t i = 0; i < assigned.size(); ++i)
      af << query.ids[i] << ',' << query.labels[i] << ',' << assigned[i]
         << '\n';
  }
  std::cout << "clustered " << model.labels.size() << " shapes into " << k
            << " groups\n";
}

// --- overlay -----------------------------------------------------------------

void write_svg_overlay(const ms::ImageTensor& img, const ms::LandmarkSet& pts,
                       const fs::path& out) {
  const std::size_t rows = img.dims[0];
  const std::size_t cols = img.dims[1];
  double lo = img.data[0], hi = img.data[0];
  for (double v : img.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;

  std::ofstream svg = open_out(out);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << cols * 8
      << "\" height=\"" << rows * 8 << "\" viewBox=\"0 0 " << cols << ' '
      << rows << "\">\n";
  svg << "<rect width=\"" << cols << "\" height=\"" << rows
      << "\" fill=\"black\"/>\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const int g = static_cast<int>(
          std::lround((img.data[r * cols + c] - lo) * scale));
      if (g == 0) continue;  // background rect already black
      svg << "<rect x=\"" << c << "\" y=\"" << r
          << "\" width=\"1\" height=\"1\" fill=\"rgb(" << g << ',' << g << ','
          << g << ")\"/>\n";
    }
  }
  for (Eigen::Index j = 0; j < pts.rows(); ++j) {
    const double y = ms::index_from_coord(pts(j, 0), rows) + 0.5;
    const double x = ms::index_from_coord(pts(j, 1), cols) + 0.5;
    svg << "<circle cx=\"" << ms::format_double(x) << "\" cy=\""
        << ms::format_double(y)
        << "\" r=\"0.9\" fill=\"none\" stroke=\"#e63946\" "
           "stroke-width=\"0.3\"/>\n";
    svg << "<text x=\"" << ms::format_double(x + 1.1) << "\" y=\""
        << ms::format_double(y + 0.5)
        << "\" font-size=\"1.6\" fill=\"#ffd166\">" << j << "</text>\n";
  }
  svg << "</svg>\n";
  if (!svg) throw ms::IoError("overlay: write failed for " + out.string());
}

void write_slice_overlay(const ms::ImageTensor& img, const ms::LandmarkSet& pts,
                         long slice, const fs::path& out) {
  const std::size_t n0 = img.dims[0], n1 = img.dims[1], n2 = img.dims[2];
  if (slice < 0) slice = static_cast<long>(n0 / 2);
  if (slice >= static_cast<long>(n0))
    throw ms::InvalidArgumentError("overlay: slice index out of range");

  ms::ImageTensor flat({n1, n2});
  const std::size_t base = static_cast<std::size_t>(slice) * n1 * n2;
  double lo = img.data[base], hi = img.data[base];
  for (std::size_t k = 0; k < n1 * n2; ++k) {
    lo = std::min(lo, img.data[base + k]);
    hi = std::max(hi, img.data[base + k]);
  }
  const double scale = hi > lo ? 1.0 / (hi - lo) : 0.0;
  for (std::size_t k = 0; k < n1 * n2; ++k)
    flat.data[k] = (img.data[base + k] - lo) * scale;

  // Crosshair markers for landmarks whose axis-0 index rounds to the slice.
  for (Eigen::Index j = 0; j < pts.rows(); ++j) {
    const long s = std::lround(ms::index_from_coord(pts(j, 0), n0));
    if (s != slice) continue;
    const long r = std::lround(ms::index_from_coord(pts(j, 1), n1));
    const long c = std::lround(ms::index_from_coord(pts(j, 2), n2));
    for (long t = -2; t <= 2; ++t) {
      const long rr = std::clamp<long>(r + t, 0, static_cast<long>(n1) - 1);
      const long cc = std::clamp<long>(c + t, 0, static_cast<long>(n2) - 1);
      flat.data[static_cast<std::size_t>(rr) * n2 + static_cast<std::size_t>(c)] = 1.0;
      flat.data[static_cast<std::size_t>(r) * n2 + static_cast<std::size_t>(cc)] = 1.0;
    }
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  ms::export_pgm(flat, out);
}

void run_overlay(const fs::path& image, const fs::path& landmarks,
                 const fs::path& out, long slice) {
  const ms::ImageTensor img = ms::load_tensor(image);
  const ms::LandmarkSet pts = ms::load_landmarks(landmarks);
  if (static_cast<std::size_t>(pts.cols()) != img.ndim())
    throw ms::DimensionMismatchError(
        "overlay: landmark rank does not match image rank");
  if (img.ndim() == 2) {
    write_svg_overlay(img, pts, out);
  } else {
    write_slice_overlay(img, pts, slice, out);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "morphoscope: self-supervised discovery of shape landmarks via "
      "registration.\nWorker threads are capped by the MORPHOSCOPE_THREADS "
      "environment variable."};
  app.require_subcommand(1);

  // synth ---------------------------------------------------------------
  SynthArgs synth_args;
  CLI::App* synth = app.add_subcommand(
      "synth", "Generate a synthetic dataset with known ground truth");
  synth->add_option("--kind", synth_args.kind,
                    "Dataset kind: phantom (warped head-phantom cohort), blob "
                    "(one 3D volume), two-class (bimodal blob images)")
      ->check(CLI::IsMember({"phantom", "blob", "two-class"}))
      ->capture_default_str();
  synth->add_option("--out", synth_args.out, "Output directory")->required();
  synth->add_option("--count", synth_args.count,
                    "Image count (per class for two-class)")
      ->capture_default_str();
  synth->add_option("--sigma", synth_args.sigma,
                    "Control-point displacement (phantom) or aspect jitter "
                    "(two-class), normalized units")
      ->capture_default_str();
  synth->add_option("--size", synth_args.size, "Grid extent per axis")
      ->capture_default_str();
  synth->add_option("--seed", synth_args.seed, "Random seed")
      ->capture_default_str();
  synth->callback([&] { run_synth(synth_args); });

  // train ---------------------------------------------------------------
  TrainArgs train_args;
  CLI::App* train = app.add_subcommand(
      "train", "Train the landmark detector on a synthesized dataset");
  train->add_option("--config", train_args.config,
                    "JSON config file (flags override file values)")
      ->check(CLI::ExistingFile);
  train->add_option("--data", train_args.data, "Dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  train->add_option("--out", train_args.out, "Output directory")->required();
  CLI::Option* t_seed =
      train->add_option("--seed", train_args.seed, "Random seed");
  CLI::Option* t_lambda = train->add_option(
      "--lambda", train_args.lambda, "Condition-number regularizer weight");
  CLI::Option* t_epochs =
      train->add_option("--epochs", train_args.epochs, "Training epochs");
  CLI::Option* t_landmarks = train->add_option(
      "--landmarks", train_args.landmarks, "Learned landmark count");
  CLI::Option* t_anchors =
      train->add_option("--anchors", train_args.anchors,
                        "Fixed landmarks appended to the detector output")
          ->check(CLI::IsMember({"corners", "none"}));
  train->add_flag("--quiet", train_args.quiet, "Suppress progress output");
  train->callback([&, t_seed, t_lambda, t_epochs, t_landmarks, t_anchors] {
    run_train(train_args, t_seed->count() > 0, t_lambda->count() > 0,
              t_epochs->count() > 0, t_landmarks->count() > 0,
              t_anchors->count() > 0);
  });

  // detect --------------------------------------------------------------
  fs::path det_checkpoint, det_image, det_out;
  CLI::App* detect =
      app.add_subcommand("detect", "Detect landmarks on one image");
  detect->add_option("--checkpoint", det_checkpoint, "Checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  detect->add_option("--image", det_image, "Image tensor (.mst)")
      ->required()
      ->check(CLI::ExistingFile);
  detect->add_option("--out", det_out, "Output landmark text file")
      ->required();
  detect->callback([&] { run_detect(det_checkpoint, det_image, det_out); });

  // register ------------------------------------------------------------
  fs::path reg_checkpoint, reg_source, reg_target, reg_out;
  double reg_lambda = 1e-4;
  CLI::App* register_cmd = app.add_subcommand(
      "register", "Register a source image onto a target image");
  register_cmd
      ->add_option("--checkpoint", reg_checkpoint, "Checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  register_cmd->add_option("--source", reg_source, "Source image (.mst)")
      ->required()
      ->check(CLI::ExistingFile);
  register_cmd->add_option("--target", reg_target, "Target image (.mst)")
      ->required()
      ->check(CLI::ExistingFile);
  register_cmd->add_option("--out", reg_out, "Output directory")->required();
  register_cmd
      ->add_option("--lambda", reg_lambda,
                   "Regularizer weight used in the reported total")
      ->capture_default_str();
  register_cmd->callback([&] {
    run_register(reg_checkpoint, reg_source, reg_target, reg_out, reg_lambda);
  });

  // cull ----------------------------------------------------------------
  fs::path cull_checkpoint, cull_data, cull_out;
  double cull_threshold = 0.0;
  std::size_t cull_pairs = ms::kDefaultScoringPairCap;
  std::uint64_t cull_seed = 0;
  std::vector<std::size_t> cull_pinned;
  CLI::App* cull = app.add_subcommand(
      "cull", "Score landmark importance and drop redundant ones");
  cull->add_option("--checkpoint", cull_checkpoint, "Checkpoint directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cull->add_option("--data", cull_data, "Dataset directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  cull->add_option("--out", cull_out, "Output directory")->required();
  CLI::Option* c_threshold = cull->add_option(
      "--threshold", cull_threshold,
      "Importance cutoff (default: 5% of the maximum score)");
  cull->add_option("--pairs", cull_pairs, "Maximum scoring pairs")
      ->capture_default_str();
  cull->add_option("--seed", cull_seed, "Random seed for pair sampling")
      ->capture_default_str();
  cull->add_option("--pin", cull_pinned,
                   "Landmark indices kept regardless of score");
  cull->callback([&, c_threshold] {
    run_cull(cull_checkpoint, cull_data, cull_out, cull_threshold,
             c_threshold->count() > 0, cull_pairs, cull_seed, cull_pinned);
  });

  // stats ---------------------------------------------------------------
  CLI::App* stats = app.add_subcommand(
      "stats", "Statistical shape analysis on a shape-matrix CSV");
  stats->require_subcommand(1);

  fs::path pca_shapes, pca_out;
  double pca_variance = 0.95;
  CLI::App* pca = stats->add_subcommand(
      "pca", "2D PCA embedding and explained-variance table");
  pca->add_option("--shapes", pca_shapes, "Shape-matrix CSV")
      ->required()
      ->check(CLI::ExistingFile);
  pca->add_option("--out", pca_out, "Output directory")->required();
  pca->add_option("--variance", pca_variance,
                  "Explained-variance target in (0,1]")
      ->capture_default_str();
  pca->callback([&] { run_stats_pca(pca_shapes, pca_out, pca_variance); });

  fs::path z_base, z_query, z_out;
  double z_variance = 0.95;
  CLI::App* zscore = stats->add_subcommand(
      "zscore", "Mahalanobis Z-scores against a base cohort");
  zscore->add_option("--base", z_base, "Base-cohort shape-matrix CSV")
      ->required()
      ->check(CLI::ExistingFile);
  zscore
      ->add_option("--query", z_query,
                   "Query shape-matrix CSV (default: the base cohort)")
      ->check(CLI::ExistingFile);
  zscore->add_option("--out", z_out, "Output directory")->required();
  zscore->add_option("--variance", z_variance,
                     "Explained-variance target in (0,1]")
      ->capture_default_str();
  zscore->callback(
      [&] { run_stats_zscore(z_base, z_query, z_out, z_variance); });

  fs::path cl_shapes, cl_assign, cl_out;
  std::size_t cl_k = 2;
  std::uint64_t cl_seed = 0;
  CLI::App* cluster =
      stats->add_subcommand("cluster", "Spectral clustering of shapes");
  cluster->add_option("--shapes", cl_shapes, "Shape-matrix CSV")
      ->required()
      ->check(CLI::ExistingFile);
  cluster->add_option("--k", cl_k, "Cluster count")
      ->required()
      ->check(CLI::Range(std::size_t{2}, std::size_t{1024}));
  cluster->add_option("--seed", cl_seed, "k-means initialization seed")
      ->capture_default_str();
  cluster
      ->add_option("--assign", cl_assign,
                   "Additional shape-matrix CSV to assign to the clusters")
      ->check(CLI::ExistingFile);
  cluster->add_option("--out", cl_out, "Output directory")->required();
  cluster->callback(
      [&] { run_stats_cluster(cl_shapes, cl_k, cl_seed, cl_assign, cl_out); });

  // overlay -------------------------------------------------------------
  fs::path ov_image, ov_landmarks, ov_out;
  long ov_slice = -1;
  CLI::App* overlay = app.add_subcommand(
      "overlay",
      "Render landmarks over an image (SVG for 2D, marked PGM slice for 3D)");
  overlay->add_option("--image", ov_image, "Image tensor (.mst)")
      ->required()
      ->check(CLI::ExistingFile);
  overlay->add_option("--landmarks", ov_landmarks, "Landmark text file")
      ->required()
      ->check(CLI::ExistingFile);
  overlay->add_option("--out", ov_out, "Output file (.svg or .pgm)")
      ->required();
  overlay->add_option("--slice", ov_slice,
                      "Axis-0 slice index for 3D volumes (default: middle)");
  overlay->callback([&] { run_overlay(ov_image, ov_landmarks, ov_out, ov_slice); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
