#pragma once

#include <cstdint>
#include <vector>

#include "ddpore/dataprep/image.hpp"

namespace ddpore::dataprep {

inline constexpr std::int64_t kPatchSize = 80;
inline constexpr std::int64_t kPatchStep = 10;

struct PatchOffset {
  std::int64_t row = 0;
  std::int64_t col = 0;
  bool operator==(const PatchOffset&) const = default;
};

// Positions 0, step, 2*step, ... <= dim - size along each axis, row-major.
// Throws ShapeError when the image is smaller than the patch.
std::vector<PatchOffset> overlapping_offsets(std::int64_t rows, std::int64_t cols,
                                             std::int64_t size = kPatchSize,
                                             std::int64_t step = kPatchStep);
std::int64_t overlapping_patch_count(std::int64_t rows, std::int64_t cols,
                                     std::int64_t size = kPatchSize,
                                     std::int64_t step = kPatchStep);

// Tiling of an image reflect-padded up to the next multiple of `size`.
struct TileLayout {
  std::int64_t rows = 0;  // original size
  std::int64_t cols = 0;
  std::int64_t padded_rows = 0;
  std::int64_t padded_cols = 0;
  std::int64_t size = kPatchSize;
  std::vector<PatchOffset> offsets;  // into the padded image, row-major
};

TileLayout tile_layout(std::int64_t rows, std::int64_t cols, std::int64_t size = kPatchSize);
std::int64_t nonoverlapping_patch_count(std::int64_t rows, std::int64_t cols,
                                        std::int64_t size = kPatchSize);

// Mirror padding without edge repetition (..., 2, 1 | 0, 1, 2, ... n-1 | n-2, ...),
// repeated as often as needed for pads larger than the image.
template <typename T>
Plane<T> reflect_pad(const Plane<T>& img, std::int64_t rows, std::int64_t cols);

template <typename T>
Plane<T> crop(const Plane<T>& img, std::int64_t row, std::int64_t col, std::int64_t rows,
              std::int64_t cols);

template <typename T>
struct Patch {
  PatchOffset offset;
  Plane<T> pixels;
};

template <typename T>
std::vector<Patch<T>> extract_patches_overlapping(const Plane<T>& img,
                                                  std::int64_t size = kPatchSize,
                                                  std::int64_t step = kPatchStep);

template <typename T>
std::vector<Patch<T>> extract_patches_nonoverlapping(const Plane<T>& img, TileLayout& layout,
                                                     std::int64_t size = kPatchSize);

// Places each tile at its offset in the padded frame and crops back to the
// original size. Tiles must match the layout's offsets, in any order.
template <typename T>
Plane<T> stitch(const std::vector<Patch<T>>& tiles, const TileLayout& layout);

}  // namespace ddpore::dataprep
