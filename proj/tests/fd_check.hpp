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

#ifndef MORPHOSCOPE_TESTS_FD_CHECK_HPP_
#define MORPHOSCOPE_TESTS_FD_CHECK_HPP_

#include <algorithm>
#include <cmath>
#include <functional>

#include <Eigen/Dense>

#include "morphoscope/autodiff.hpp"

namespace test_util {

// A differentiable scalar program: given a tape and a parameter vector,
// bind the parameters as tracked leaves (splitting theta however it
// likes, as long as the leaf values concatenate back to theta in order)
// and return the scalar root plus those leaves.
struct TapeBuild {
  morphoscope::ad::NodeId root = 0;
  std::vector<morphoscope::ad::NodeId> leaves;
};
using TapeProgram = std::function<TapeBuild(morphoscope::ad::Tape&,
                                            const Eigen::VectorXd&)>;

struct FdReport {
  double max_rel_err = 0.0;  // |analytic - central| / max(|a|, |c|, 1)
  Eigen::Index worst_index = -1;
  double worst_analytic = 0.0;
  double worst_central = 0.0;
};

// Compares the reverse-mode gradient of `program` at `theta` against
// central finite differences over every component (or over `probe`
// components if non-empty).
inline FdReport fd_check(const TapeProgram& program,
                         const Eigen::VectorXd& theta, double h = 1e-5,
                         const std::vector<Eigen::Index>& probe = {}) {
  namespace ad = morphoscope::ad;

  Eigen::VectorXd analytic = Eigen::VectorXd::Zero(theta.size());
  {
    ad::Tape tape;
    const TapeBuild build = program(tape, theta);
    tape.backward(build.root);
    Eigen::Index at = 0;
    for (const ad::NodeId leaf : build.leaves) {
      const Eigen::Index n =
          static_cast<Eigen::Index>(tape.value(leaf).data.size());
      const Eigen::VectorXd& g = tape.grad(leaf);
      if (g.size() == n) analytic.segment(at, n) = g;
      at += n;
    }
  }

  const auto value_at = [&](const Eigen::VectorXd& t) {
    ad::Tape tape;
    return tape.value(program(tape, t).root).to_scalar();
  };

  std::vector<Eigen::Index> indices = probe;
  if (indices.empty()) {
    indices.resize(static_cast<std::size_t>(theta.size()));
    for (Eigen::Index i = 0; i < theta.size(); ++i)
      indices[static_cast<std::size_t>(i)] = i;
  }

  FdReport report;
  for (const Eigen::Index i : indices) {
    Eigen::VectorXd tp = theta;
    Eigen::VectorXd tm = theta;
    tp(i) += h;
    tm(i) -= h;
    const double central = (value_at(tp) - value_at(tm)) / (2.0 * h);
    const double a = analytic(i);
    const double denom = std::max({std::abs(a), std::abs(central), 1.0});
    const double rel = std::abs(a - central) / denom;
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_central = central;
    }
  }
  return report;
}

}  // namespace test_util

#endif  // MORPHOSCOPE_TESTS_FD_CHECK_HPP_
