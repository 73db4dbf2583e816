#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ddpore/error.hpp"

namespace ddpore::dataprep {

// Row-major 2-D array.
template <typename T>
struct Plane {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<T> data;

  Plane() = default;
  Plane(std::int64_t r, std::int64_t c, T fill = T{})
      : rows(r), cols(c), data(static_cast<std::size_t>(r * c), fill) {
    if (r < 0 || c < 0) throw ShapeError("plane dimensions must be nonnegative");
  }

  T& operator()(std::int64_t r, std::int64_t c) {
    return data[static_cast<std::size_t>(r * cols + c)];
  }
  const T& operator()(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols + c)];
  }
  bool contains(std::int64_t r, std::int64_t c) const {
    return r >= 0 && c >= 0 && r < rows && c < cols;
  }
  bool operator==(const Plane&) const = default;
};

using Image8 = Plane<std::uint8_t>;

struct FingerprintImage {
  std::string id;
  Image8 pixels;
  int dpi = 0;  // metadata only; 0 when unknown
};

// Pixel / 255.
Plane<float> to_unit(const Image8& img);

// Binary PGM (P5), maxval 255.
std::vector<std::uint8_t> encode_pgm(const Image8& img);
// Binary PGM with maxval 65535, big-endian samples.
std::vector<std::uint8_t> encode_pgm16(const Plane<std::uint16_t>& img);
Image8 decode_pgm(std::span<const std::uint8_t> bytes);
// P5 with 255 < maxval <= 65535; samples returned unscaled.
Plane<std::uint16_t> decode_pgm16(std::span<const std::uint8_t> bytes);

// 8-bit grayscale PNG.
std::vector<std::uint8_t> encode_png(const Image8& img);
Image8 decode_png(std::span<const std::uint8_t> bytes);

// Dispatches on the file signature. 16-bit and color images raise
// UnsupportedDepthError; anything unparseable raises FormatError.
FingerprintImage load_image(const std::filesystem::path& path);
// Format chosen by extension (.png or .pgm). Atomic.
void save_image(const Image8& img, const std::filesystem::path& path);

}  // namespace ddpore::dataprep
