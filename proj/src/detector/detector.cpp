#include "ddpore/detector/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <thread>

#include "ddpore/dataprep/patches.hpp"
#include "ddpore/io.hpp"

namespace ddpore::detector {

using ndgrad::Grid4;
using ndgrad::Shape;

IntensityMap predict_map(porenet::PoreModel<float>& model, const dataprep::Image8& image,
                         const PredictOptions& options) {
  const auto& cfg = model.pore_config;
  if (cfg.input_rows != cfg.input_cols) {
    throw ConfigError("tiling needs a square network input, got " + std::to_string(cfg.input_rows) +
                      "x" + std::to_string(cfg.input_cols));
  }
  if (options.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  const std::int64_t size = cfg.input_rows;
  dataprep::TileLayout layout;
  const auto tiles = dataprep::extract_patches_nonoverlapping(dataprep::to_unit(image), layout, size);

  std::vector<std::size_t> order = options.tile_order;
  if (order.empty()) {
    order.resize(tiles.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
  } else {
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted[i] != i || sorted.size() != tiles.size()) {
        throw ConfigError("tile_order must be a permutation of 0.." + std::to_string(tiles.size() - 1));
      }
    }
  }

  std::vector<dataprep::Patch<float>> out(tiles.size());
  ndgrad::Tape<float> tape(false);
  porenet::PoreForwardOptions fwd;
  fwd.mode = ndgrad::BnMode::eval;
  const auto plane = static_cast<std::size_t>(size * size);
  for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(options.batch_size)) {
    const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(options.batch_size));
    Grid4<float> x(Shape{static_cast<std::int64_t>(hi - lo), 1, size, size});
    for (std::size_t k = lo; k < hi; ++k) {
      std::copy(tiles[order[k]].pixels.data.begin(), tiles[order[k]].pixels.data.end(),
                x.mutable_values().begin() + static_cast<std::ptrdiff_t>((k - lo) * plane));
    }
    const auto y = porenet::forward_pore(tape, model, x, fwd);
    for (std::size_t k = lo; k < hi; ++k) {
      auto& tile = out[order[k]];
      tile.offset = tiles[order[k]].offset;
      tile.pixels = dataprep::Plane<float>(size, size);
      const auto src = y.values().subspan((k - lo) * plane, plane);
      std::copy(src.begin(), src.end(), tile.pixels.data.begin());
    }
  }
  return dataprep::stitch(out, layout);
}

std::vector<IntensityMap> predict_maps(porenet::PoreModel<float>& model,
                                       std::span<const dataprep::Image8> images, int threads) {
  if (threads < 1) throw ConfigError("threads must be >= 1");
  std::vector<IntensityMap> maps(images.size());
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), images.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < images.size(); ++i) maps[i] = predict_map(model, images[i]);
    return maps;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < images.size(); i += workers) maps[i] = predict_map(model, images[i]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return maps;
}

std::vector<DetectedPore> local_maxima(const IntensityMap& map, double threshold, std::int64_t window) {
  if (window < 1 || window % 2 == 0) throw ConfigError("window must be odd and positive");
  const std::int64_t r = window / 2;
  const std::int64_t rows = map.rows;
  const std::int64_t cols = map.cols;
  // Separable clipped max filter: rows first, then columns.
  IntensityMap horiz(rows, cols);
  for (std::int64_t i = 0; i < rows; ++i) {
    for (std::int64_t j = 0; j < cols; ++j) {
      float m = map(i, j);
      for (std::int64_t c = std::max<std::int64_t>(0, j - r); c <= std::min(cols - 1, j + r); ++c) {
        m = std::max(m, map(i, c));
      }
      horiz(i, j) = m;
    }
  }
  std::vector<DetectedPore> out;
  for (std::int64_t i = 0; i < rows; ++i) {
    for (std::int64_t j = 0; j < cols; ++j) {
      const float v = map(i, j);
      if (!(static_cast<double>(v) > threshold)) continue;
      float m = v;
      for (std::int64_t q = std::max<std::int64_t>(0, i - r); q <= std::min(rows - 1, i + r); ++q) {
        m = std::max(m, horiz(q, j));
      }
      if (v == m) out.push_back({i, j, v});
    }
  }
  return out;
}

std::vector<DetectedPore> detect(porenet::PoreModel<float>& model, const dataprep::Image8& image,
                                 double threshold, IntensityMap* map_out) {
  auto map = predict_map(model, image);
  auto pores = local_maxima(map, threshold);
  if (map_out != nullptr) *map_out = std::move(map);
  return pores;
}

dataprep::PoreList to_pore_list(std::span<const DetectedPore> pores) {
  dataprep::PoreList out;
  out.reserve(pores.size());
  for (const auto& p : pores) out.push_back({p.row, p.col});
  return out;
}

double save_intensity_map(const IntensityMap& map, const std::filesystem::path& path) {
  float peak = 0.0f;
  for (float v : map.data) {
    if (!std::isfinite(v) || v < 0.0f) throw NumericError("intensity map must be finite and nonnegative");
    peak = std::max(peak, v);
  }
  const double scale = peak > 0.0f ? 65535.0 / static_cast<double>(peak) : 1.0;
  dataprep::Plane<std::uint16_t> q(map.rows, map.cols);
  for (std::size_t i = 0; i < map.data.size(); ++i) {
    q.data[i] = static_cast<std::uint16_t>(
        std::min(65535.0, std::round(static_cast<double>(map.data[i]) * scale)));
  }
  write_file_atomic(path, dataprep::encode_pgm16(q));
  return scale;
}

IntensityMap load_intensity_map(const std::filesystem::path& path, double scale) {
  if (!(scale > 0.0)) throw ConfigError("map scale must be positive");
  const auto q = dataprep::decode_pgm16(read_file(path));
  IntensityMap out(q.rows, q.cols);
  for (std::size_t i = 0; i < q.data.size(); ++i) {
    out.data[i] = static_cast<float>(static_cast<double>(q.data[i]) / scale);
  }
  return out;
}

}  // namespace ddpore::detector
