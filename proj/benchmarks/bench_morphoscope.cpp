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

#include <benchmark/benchmark.h>

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "morphoscope/autodiff.hpp"
#include "morphoscope/landmarks.hpp"
#include "morphoscope/network.hpp"
#include "morphoscope/phantom.hpp"
#include "morphoscope/rng.hpp"
#include "morphoscope/tensor.hpp"
#include "morphoscope/tps.hpp"
#include "morphoscope/training.hpp"

namespace {

using namespace morphoscope;

// Well-spread deterministic landmark set: K points on a jittered ring so
// the spline system stays comfortably regular at every benchmarked size.
LandmarkSet ring_landmarks(int count, int dim, std::uint64_t seed) {
  Rng rng(seed);
  LandmarkSet points(count, dim);
  for (int i = 0; i < count; ++i) {
    const double angle = 6.283185307179586 * i / count;
    const double radius = 0.55 + 0.25 * rng.next_double();
    points(i, 0) = radius * std::cos(angle);
    points(i, 1) = radius * std::sin(angle);
    if (dim == 3) points(i, 2) = 0.8 * (2.0 * rng.next_double() - 1.0);
  }
  return points;
}

LandmarkSet jittered(const LandmarkSet& base, std::uint64_t seed) {
  Rng rng(seed);
  LandmarkSet moved = base;
  for (Eigen::Index i = 0; i < moved.size(); ++i) {
    moved.data()[i] += 0.05 * (2.0 * rng.next_double() - 1.0);
  }
  return moved;
}

void BM_TpsAssembleSolve(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  const LandmarkSet l_t = ring_landmarks(k, 2, 41);
  const LandmarkSet l_s = jittered(l_t, 42);
  for (auto _ : state) {
    TpsModel model = assemble(l_t, l_s);
    solve(model);
    benchmark::DoNotOptimize(model.W.data());
  }
}
BENCHMARK(BM_TpsAssembleSolve)->Arg(8)->Arg(16)->Arg(34);

void BM_ConditionFrobenius(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  const TpsModel model =
      assemble(ring_landmarks(k, 2, 43), ring_landmarks(k, 2, 43));
  for (auto _ : state) {
    benchmark::DoNotOptimize(condition_frobenius(model.A));
  }
}
BENCHMARK(BM_ConditionFrobenius)->Arg(8)->Arg(16)->Arg(34);

void BM_WarpImage64(benchmark::State& state) {
  const LandmarkSet l_t = ring_landmarks(34, 2, 44);
  const LandmarkSet l_s = jittered(l_t, 45);
  TpsModel model = assemble(l_t, l_s);
  solve(model);
  const ImageTensor source = rasterize_phantom({64, 64});
  for (auto _ : state) {
    ImageTensor registered = warp(model, source, {64, 64});
    benchmark::DoNotOptimize(registered.data.data());
  }
}
BENCHMARK(BM_WarpImage64);

void BM_RasterizePhantom(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    ImageTensor img = rasterize_phantom({n, n});
    benchmark::DoNotOptimize(img.data.data());
  }
}
BENCHMARK(BM_RasterizePhantom)->Arg(64)->Arg(128);

void BM_Detect64(benchmark::State& state) {
  const ArchSpec arch = ArchSpec::standard({64, 64}, 26, corner_landmarks(2));
  const NetParams params = init_params(arch, 7);
  const ImageTensor img = whiten(rasterize_phantom({64, 64}));
  for (auto _ : state) {
    LandmarkSet landmarks = detect(params, img);
    benchmark::DoNotOptimize(landmarks.data());
  }
}
BENCHMARK(BM_Detect64);

// One full training step worth of work (forward + backward through the
// siamese pair, spline solve, and resampling) at probe scale.
void BM_PairGradient32(benchmark::State& state) {
  ArchSpec arch;
  arch.input_dims = {32, 32};
  arch.convs = {{4, 2}, {8, 2}};
  arch.hidden = 32;
  arch.learned_landmarks = 8;
  arch.anchors = corner_landmarks(2);
  const NetParams params = init_params(arch, 11);
  const ImageTensor target = whiten(rasterize_phantom({32, 32}));
  ImageTensor source = target;
  for (double& v : source.data) v *= 0.97;
  const Eigen::MatrixXd grid = grid_coordinates({32, 32});
  for (auto _ : state) {
    ad::Tape tape;
    const std::vector<ad::NodeId> ids = bind_trainable(tape, params);
    const PairLossNodes loss = pair_loss_on_tape(
        tape, arch, ids, target, source, target, source, 1e-4, grid);
    tape.backward(loss.total);
    const Eigen::VectorXd& grad = tape.grad(ids[0]);
    benchmark::DoNotOptimize(grad.data());
  }
}
BENCHMARK(BM_PairGradient32);

}  // namespace

BENCHMARK_MAIN();
