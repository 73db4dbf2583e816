#pragma once

#include "ddpore/dataprep/image.hpp"
#include "ddpore/dataprep/pores.hpp"

namespace ddpore::dataprep {

inline constexpr double kLabelRadius = 5.0;

// 1 - d / radius for d < radius, else 0.
double label_at_distance(double d, double radius = kLabelRadius);

// I(i,j) = max over pores g of 1 - d((i,j), g) / radius where d < radius,
// else 0; d is Euclidean. Out-of-bounds pores raise BoundsError.
Plane<double> pore_label_image(const PoreList& pores, std::int64_t rows, std::int64_t cols,
                               double radius = kLabelRadius);

}  // namespace ddpore::dataprep
