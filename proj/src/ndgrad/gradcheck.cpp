#include "ddpore/ndgrad/gradcheck.hpp"

#include "ddpore/ndgrad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

namespace ddpore::ndgrad {

GradCheckResult gradcheck(const std::function<Grid4<double>(Tape<double>&)>& loss,
                          std::vector<GradCheckTarget> targets,
                          const GradCheckOptions& options) {
  for (auto& t : targets) {
    t.tensor.set_requires_grad(true);
    t.tensor.clear_grad();
  }
  {
    Tape<double> tape;
    Grid4<double> value = loss(tape);
    tape.backward(value);
  }

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  Tape<double> silent = Tape<double>::disabled();

  for (auto& t : targets) {
    const auto total = static_cast<std::size_t>(t.tensor.numel());
    std::vector<std::size_t> picks(total);
    std::iota(picks.begin(), picks.end(), std::size_t{0});
    if (options.entries_per_tensor != 0 && options.entries_per_tensor < total) {
      std::shuffle(picks.begin(), picks.end(), rng);
      picks.resize(options.entries_per_tensor);
      std::sort(picks.begin(), picks.end());
    }
    const std::vector<double> analytic = t.tensor.has_grad()
        ? std::vector<double>(t.tensor.grad().begin(), t.tensor.grad().end())
        : std::vector<double>(total, 0.0);

    for (std::size_t idx : picks) {
      double& v = t.tensor.mutable_values()[idx];
      const double saved = v;
      std::optional<ReluSignProbe> probe;
      if (options.skip_relu_kinks) probe.emplace();
      v = saved + options.step;
      const double up = loss(silent).item();
      const auto up_signs = probe ? probe->take() : std::vector<std::uint8_t>{};
      v = saved - options.step;
      const double down = loss(silent).item();
      const auto down_signs = probe ? probe->take() : std::vector<std::uint8_t>{};
      v = saved;
      probe.reset();
      if (up_signs != down_signs) {
        ++result.skipped_kinks;
        continue;
      }

      const double numeric = (up - down) / (2.0 * options.step);
      const double a = analytic[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++result.checked;
      if (rel > result.max_rel_error || result.worst_index < 0) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        result.worst_tensor = t.name;
        result.worst_index = static_cast<std::int64_t>(idx);
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace ddpore::ndgrad
