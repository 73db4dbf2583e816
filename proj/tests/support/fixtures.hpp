#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "ddpore/dataprep/dataset.hpp"
#include "ddpore/dataprep/synth.hpp"
#include "ddpore/ndgrad/grid4.hpp"

namespace ddpore::testing {

template <typename T = double>
ndgrad::Grid4<T> random_grid(ndgrad::Shape shape, std::uint64_t seed, double lo = -1.0,
                             double hi = 1.0, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return ndgrad::Grid4<T>(shape, std::move(v), requires_grad);
}

template <typename T>
std::vector<T> to_vector(std::span<const T> s) {
  return std::vector<T>(s.begin(), s.end());
}

// Synthetic images as a dataset of the given domain (pores always attached).
inline std::vector<dataprep::DatasetImage> as_dataset(const std::vector<dataprep::SynthImage>& imgs,
                                                      dataprep::Domain domain) {
  std::vector<dataprep::DatasetImage> out;
  for (const auto& s : imgs) out.push_back({s.image, s.pores, domain});
  return out;
}

}  // namespace ddpore::testing
