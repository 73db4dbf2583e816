#include "ddpore/dataprep/patches.hpp"

#include <algorithm>
#include <string>

namespace ddpore::dataprep {

namespace {

void check_geometry(std::int64_t size, std::int64_t step) {
  if (size <= 0) throw ConfigError("patch size must be positive");
  if (step <= 0) throw ConfigError("patch step must be positive");
}

std::int64_t round_up(std::int64_t v, std::int64_t m) { return (v + m - 1) / m * m; }

// Index into [0, n) under mirror reflection without edge repetition.
std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

std::vector<PatchOffset> overlapping_offsets(std::int64_t rows, std::int64_t cols,
                                             std::int64_t size, std::int64_t step) {
  check_geometry(size, step);
  if (rows < size || cols < size) {
    throw ShapeError("image " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " is smaller than the " + std::to_string(size) + "x" + std::to_string(size) +
                     " patch");
  }
  std::vector<PatchOffset> out;
  for (std::int64_t r = 0; r + size <= rows; r += step) {
    for (std::int64_t c = 0; c + size <= cols; c += step) out.push_back({r, c});
  }
  return out;
}

std::int64_t overlapping_patch_count(std::int64_t rows, std::int64_t cols, std::int64_t size,
                                     std::int64_t step) {
  check_geometry(size, step);
  if (rows < size || cols < size) return 0;
  return ((rows - size) / step + 1) * ((cols - size) / step + 1);
}

TileLayout tile_layout(std::int64_t rows, std::int64_t cols, std::int64_t size) {
  check_geometry(size, 1);
  if (rows <= 0 || cols <= 0) throw ShapeError("cannot tile an empty image");
  TileLayout layout;
  layout.rows = rows;
  layout.cols = cols;
  layout.size = size;
  layout.padded_rows = round_up(rows, size);
  layout.padded_cols = round_up(cols, size);
  for (std::int64_t r = 0; r < layout.padded_rows; r += size) {
    for (std::int64_t c = 0; c < layout.padded_cols; c += size) layout.offsets.push_back({r, c});
  }
  return layout;
}

std::int64_t nonoverlapping_patch_count(std::int64_t rows, std::int64_t cols, std::int64_t size) {
  return static_cast<std::int64_t>(tile_layout(rows, cols, size).offsets.size());
}

template <typename T>
Plane<T> reflect_pad(const Plane<T>& img, std::int64_t rows, std::int64_t cols) {
  if (rows < img.rows || cols < img.cols) throw ShapeError("reflect_pad cannot shrink an image");
  if (img.rows == 0 || img.cols == 0) throw ShapeError("cannot pad an empty image");
  Plane<T> out(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t sr = reflect_index(r, img.rows);
    for (std::int64_t c = 0; c < cols; ++c) out(r, c) = img(sr, reflect_index(c, img.cols));
  }
  return out;
}

template <typename T>
Plane<T> crop(const Plane<T>& img, std::int64_t row, std::int64_t col, std::int64_t rows,
              std::int64_t cols) {
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > img.rows || col + cols > img.cols) {
    throw BoundsError("crop window lies outside the image");
  }
  Plane<T> out(rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto src = img.data.begin() + static_cast<std::ptrdiff_t>((row + r) * img.cols + col);
    std::copy(src, src + cols, out.data.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return out;
}

template <typename T>
std::vector<Patch<T>> extract_patches_overlapping(const Plane<T>& img, std::int64_t size,
                                                  std::int64_t step) {
  std::vector<Patch<T>> out;
  for (const auto& off : overlapping_offsets(img.rows, img.cols, size, step)) {
    out.push_back({off, crop(img, off.row, off.col, size, size)});
  }
  return out;
}

template <typename T>
std::vector<Patch<T>> extract_patches_nonoverlapping(const Plane<T>& img, TileLayout& layout,
                                                     std::int64_t size) {
  layout = tile_layout(img.rows, img.cols, size);
  const Plane<T> padded = reflect_pad(img, layout.padded_rows, layout.padded_cols);
  std::vector<Patch<T>> out;
  for (const auto& off : layout.offsets) out.push_back({off, crop(padded, off.row, off.col, size, size)});
  return out;
}

template <typename T>
Plane<T> stitch(const std::vector<Patch<T>>& tiles, const TileLayout& layout) {
  if (tiles.size() != layout.offsets.size()) {
    throw ShapeError("stitch: " + std::to_string(tiles.size()) + " tiles for a layout of " +
                     std::to_string(layout.offsets.size()));
  }
  Plane<T> full(layout.padded_rows, layout.padded_cols);
  std::vector<bool> placed(layout.offsets.size(), false);
  for (const auto& tile : tiles) {
    const auto it = std::find(layout.offsets.begin(), layout.offsets.end(), tile.offset);
    if (it == layout.offsets.end()) throw ShapeError("stitch: tile offset not in layout");
    const auto k = static_cast<std::size_t>(it - layout.offsets.begin());
    if (placed[k]) throw ShapeError("stitch: duplicate tile");
    placed[k] = true;
    if (tile.pixels.rows != layout.size || tile.pixels.cols != layout.size) {
      throw ShapeError("stitch: tile size does not match layout");
    }
    for (std::int64_t r = 0; r < layout.size; ++r) {
      for (std::int64_t c = 0; c < layout.size; ++c) {
        full(tile.offset.row + r, tile.offset.col + c) = tile.pixels(r, c);
      }
    }
  }
  return crop(full, 0, 0, layout.rows, layout.cols);
}

#define DDPORE_INSTANTIATE_PATCHES(T)                                                          \
  template Plane<T> reflect_pad<T>(const Plane<T>&, std::int64_t, std::int64_t);               \
  template Plane<T> crop<T>(const Plane<T>&, std::int64_t, std::int64_t, std::int64_t,         \
                            std::int64_t);                                                     \
  template std::vector<Patch<T>> extract_patches_overlapping<T>(const Plane<T>&, std::int64_t, \
                                                                std::int64_t);                 \
  template std::vector<Patch<T>> extract_patches_nonoverlapping<T>(const Plane<T>&,            \
                                                                   TileLayout&, std::int64_t); \
  template Plane<T> stitch<T>(const std::vector<Patch<T>>&, const TileLayout&);

DDPORE_INSTANTIATE_PATCHES(std::uint8_t)
DDPORE_INSTANTIATE_PATCHES(float)
DDPORE_INSTANTIATE_PATCHES(double)

#undef DDPORE_INSTANTIATE_PATCHES

}  // namespace ddpore::dataprep
