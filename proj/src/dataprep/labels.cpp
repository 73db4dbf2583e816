#include "ddpore/dataprep/labels.hpp"

#include <algorithm>
#include <cmath>

namespace ddpore::dataprep {

double label_at_distance(double d, double radius) { return d < radius ? 1.0 - d / radius : 0.0; }

Plane<double> pore_label_image(const PoreList& pores, std::int64_t rows, std::int64_t cols,
                               double radius) {
  if (!(radius > 0.0)) throw ConfigError("label radius must be positive");
  check_in_bounds(pores, rows, cols);
  Plane<double> out(rows, cols, 0.0);
  const auto reach = static_cast<std::int64_t>(std::ceil(radius));
  for (const Pore& p : pores) {
    for (std::int64_t r = std::max<std::int64_t>(0, p.row - reach);
         r <= std::min(rows - 1, p.row + reach); ++r) {
      for (std::int64_t c = std::max<std::int64_t>(0, p.col - reach);
           c <= std::min(cols - 1, p.col + reach); ++c) {
        const double d = std::hypot(static_cast<double>(r - p.row), static_cast<double>(c - p.col));
        out(r, c) = std::max(out(r, c), label_at_distance(d, radius));
      }
    }
  }
  return out;
}

}  // namespace ddpore::dataprep
