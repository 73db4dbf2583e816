#pragma once

#include <cstdint>
#include <vector>

#include "ddpore/dataprep/image.hpp"
#include "ddpore/dataprep/pores.hpp"
#include "json.hpp"

namespace ddpore::dataprep {

// Oriented-sinusoid ridge images with bright elliptical pore blobs centred
// on ridge centrelines. Intensities are in 8-bit grey levels.
struct SynthConfig {
  std::int64_t rows = 160;
  std::int64_t cols = 160;
  std::int64_t count = 10;
  double ridge_period = 10.0;      // px between ridge centrelines
  std::uint64_t orientation_seed = 0;  // mixed into each image's orientation draw
  double ridge_curvature = 0.15;   // phase wobble amplitude, in periods
  double pore_radius_min = 1.2;    // half-maximum semi-axis, px
  double pore_radius_max = 1.8;
  double pore_density = 1.0 / 20.0;  // pores per px of ridge centreline
  double valley_level = 200.0;
  double ridge_contrast = 90.0;    // valley minus ridge centre
  double blob_contrast = 90.0;     // peak added at a pore centre
  double noise_sigma = 5.0;
  int dpi = 1200;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const SynthConfig&) const = default;
};

void to_json(nlohmann::ordered_json& j, const SynthConfig& cfg);
// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::ordered_json& j, SynthConfig& cfg);

struct SynthImage {
  FingerprintImage image;
  PoreList pores;               // blob centres, row-major order
  std::vector<double> radii;    // major half-maximum semi-axis per pore
};

// Deterministic in (cfg, seed). Throws ConfigError when the requested pore
// density cannot be placed without overlapping blobs.
std::vector<SynthImage> synth_images(const SynthConfig& cfg, std::uint64_t seed);

struct DomainPair {
  std::vector<SynthImage> source;
  std::vector<SynthImage> target;
};

DomainPair synth_domain_pair(const SynthConfig& source, const SynthConfig& target,
                             std::uint64_t seed);

}  // namespace ddpore::dataprep
