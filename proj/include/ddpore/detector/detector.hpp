#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ddpore/dataprep/image.hpp"
#include "ddpore/dataprep/pores.hpp"
#include "ddpore/porenet/network.hpp"

namespace ddpore::detector {

using IntensityMap = dataprep::Plane<float>;

struct DetectedPore {
  std::int64_t row = 0;
  std::int64_t col = 0;
  float intensity = 0.0f;
  bool operator==(const DetectedPore&) const = default;
};

struct PredictOptions {
  std::int64_t batch_size = 16;
  // Tile processing order (a permutation of the tile indices); empty means
  // row-major.
  std::vector<std::size_t> tile_order;
};

// Reflect-pads the image to whole tiles of the model's (square) input size,
// runs the network in eval mode on each tile and stitches the result back
// to the image size.
IntensityMap predict_map(porenet::PoreModel<float>& model, const dataprep::Image8& image,
                         const PredictOptions& options = {});

// One map per image; images are spread over `threads` workers. The model is
// only read.
std::vector<IntensityMap> predict_maps(porenet::PoreModel<float>& model,
                                       std::span<const dataprep::Image8> images, int threads = 1);

// Pixels equal to the maximum of the window x window neighbourhood clipped
// to the map and strictly above `threshold`, in row-major order. Plateau
// pixels tie and are all reported.
std::vector<DetectedPore> local_maxima(const IntensityMap& map, double threshold,
                                       std::int64_t window = 5);

std::vector<DetectedPore> detect(porenet::PoreModel<float>& model, const dataprep::Image8& image,
                                 double threshold, IntensityMap* map_out = nullptr);

dataprep::PoreList to_pore_list(std::span<const DetectedPore> pores);

// 16-bit PGM dump: sample = round(value * scale), scale = 65535 / max (1 when
// the map is all zero). Returns the scale.
double save_intensity_map(const IntensityMap& map, const std::filesystem::path& path);
IntensityMap load_intensity_map(const std::filesystem::path& path, double scale);

}  // namespace ddpore::detector
