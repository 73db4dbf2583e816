#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ddpore/ndgrad/grid4.hpp"
#include "ddpore/ndgrad/tape.hpp"

namespace ddpore::ndgrad {

struct GradCheckOptions {
  double step = 1e-4;
  // 0 checks every entry; otherwise this many entries per tensor, chosen
  // with a seeded generator.
  std::size_t entries_per_tensor = 0;
  std::uint64_t seed = 0;
  // Denominator floor for the relative error. Entries whose analytic and
  // numeric derivatives are both below this are compared absolutely.
  double floor = 1e-6;
  // Skips entries whose +step and -step evaluations put some ReLU input on
  // different sides of zero; the central difference is not a derivative
  // there.
  bool skip_relu_kinks = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

struct GradCheckTarget {
  std::string name;
  Grid4<double> tensor;
};

// Compares reverse-mode gradients of a scalar function against central
// finite differences. `loss` must build its result on the tape it is given
// and must be deterministic given the current tensor values.
GradCheckResult gradcheck(
    const std::function<Grid4<double>(Tape<double>&)>& loss,
    std::vector<GradCheckTarget> targets, const GradCheckOptions& options = {});

}  // namespace ddpore::ndgrad
