#include "ddpore/dataprep/image.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cstring>
#include <string>

#include "ddpore/io.hpp"

namespace ddpore::dataprep {

namespace {

class PgmReader {
 public:
  explicit PgmReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::string magic() {
    if (bytes_.size() < 2) throw FormatError("PGM: file too short");
    pos_ = 2;
    return std::string(reinterpret_cast<const char*>(bytes_.data()), 2);
  }

  std::int64_t header_int(const char* field) {
    skip_space_and_comments();
    std::int64_t v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_]) != 0) {
      v = v * 10 + (bytes_[pos_] - '0');
      if (v > (std::int64_t{1} << 31)) throw FormatError(std::string("PGM: ") + field + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw FormatError(std::string("PGM: missing ") + field);
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  std::size_t raster_start() {
    if (pos_ >= bytes_.size() || std::isspace(bytes_[pos_]) == 0) {
      throw FormatError("PGM: header not terminated by whitespace");
    }
    return pos_ + 1;
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_]) != 0) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> pgm_header(std::int64_t rows, std::int64_t cols, int maxval) {
  const std::string h =
      "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n" + std::to_string(maxval) + "\n";
  return {h.begin(), h.end()};
}

bool has_png_signature(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  return bytes.size() >= 8 && std::memcmp(bytes.data(), kSig, 8) == 0;
}

}  // namespace

Plane<float> to_unit(const Image8& img) {
  Plane<float> out(img.rows, img.cols);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = static_cast<float>(img.data[i]) / 255.0f;
  return out;
}

std::vector<std::uint8_t> encode_pgm(const Image8& img) {
  auto out = pgm_header(img.rows, img.cols, 255);
  out.insert(out.end(), img.data.begin(), img.data.end());
  return out;
}

std::vector<std::uint8_t> encode_pgm16(const Plane<std::uint16_t>& img) {
  auto out = pgm_header(img.rows, img.cols, 65535);
  out.reserve(out.size() + 2 * img.data.size());
  for (std::uint16_t v : img.data) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
  }
  return out;
}

Image8 decode_pgm(std::span<const std::uint8_t> bytes) {
  PgmReader r(bytes);
  const std::string magic = r.magic();
  if (magic == "P6" || magic == "P3") throw UnsupportedDepthError("PGM: color images are not supported");
  if (magic != "P5") throw FormatError("PGM: expected binary P5 header, got '" + magic + "'");
  const std::int64_t cols = r.header_int("width");
  const std::int64_t rows = r.header_int("height");
  const std::int64_t maxval = r.header_int("maxval");
  if (maxval <= 0) throw FormatError("PGM: maxval must be positive");
  if (maxval > 255) {
    throw UnsupportedDepthError("PGM: only 8-bit images are supported (maxval " +
                                std::to_string(maxval) + ")");
  }
  const std::size_t start = r.raster_start();
  const auto n = static_cast<std::size_t>(rows * cols);
  if (bytes.size() < start + n) throw FormatError("PGM: raster truncated");
  Image8 img(rows, cols);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(start), n, img.data.begin());
  return img;
}

Plane<std::uint16_t> decode_pgm16(std::span<const std::uint8_t> bytes) {
  PgmReader r(bytes);
  const std::string magic = r.magic();
  if (magic != "P5") throw FormatError("PGM: expected binary P5 header, got '" + magic + "'");
  const std::int64_t cols = r.header_int("width");
  const std::int64_t rows = r.header_int("height");
  const std::int64_t maxval = r.header_int("maxval");
  if (maxval <= 255 || maxval > 65535) {
    throw FormatError("PGM: expected a 16-bit maxval, got " + std::to_string(maxval));
  }
  const std::size_t start = r.raster_start();
  const auto n = static_cast<std::size_t>(rows * cols);
  if (bytes.size() < start + 2 * n) throw FormatError("PGM: raster truncated");
  Plane<std::uint16_t> img(rows, cols);
  for (std::size_t i = 0; i < n; ++i) {
    img.data[i] = static_cast<std::uint16_t>((bytes[start + 2 * i] << 8) | bytes[start + 2 * i + 1]);
  }
  return img;
}

std::vector<std::uint8_t> encode_png(const Image8& img) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.cols);
  png.height = static_cast<png_uint_32>(img.rows);
  png.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (png_image_write_to_memory(&png, nullptr, &size, 0, img.data.data(), 0, nullptr) == 0) {
    throw FormatError(std::string("PNG encode failed: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (png_image_write_to_memory(&png, out.data(), &size, 0, img.data.data(), 0, nullptr) == 0) {
    throw FormatError(std::string("PNG encode failed: ") + png.message);
  }
  out.resize(size);
  return out;
}

Image8 decode_png(std::span<const std::uint8_t> bytes) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()) == 0) {
    throw FormatError(std::string("PNG decode failed: ") + png.message);
  }
  const auto fmt = png.format;
  if ((fmt & (PNG_FORMAT_FLAG_COLOR | PNG_FORMAT_FLAG_LINEAR | PNG_FORMAT_FLAG_ALPHA)) != 0) {
    png_image_free(&png);
    throw UnsupportedDepthError("PNG: only 8-bit grayscale without alpha is supported");
  }
  png.format = PNG_FORMAT_GRAY;
  Image8 img(png.height, png.width);
  if (png_image_finish_read(&png, nullptr, img.data.data(), 0, nullptr) == 0) {
    throw FormatError(std::string("PNG decode failed: ") + png.message);
  }
  return img;
}

FingerprintImage load_image(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  FingerprintImage out;
  out.id = path.stem().string();
  try {
    out.pixels = has_png_signature(bytes) ? decode_png(bytes) : decode_pgm(bytes);
  } catch (const UnsupportedDepthError& e) {
    throw UnsupportedDepthError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return out;
}

void save_image(const Image8& img, const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") {
    write_file_atomic(path, encode_png(img));
  } else if (ext == ".pgm") {
    write_file_atomic(path, encode_pgm(img));
  } else {
    throw ConfigError("unsupported image extension '" + ext + "' (use .png or .pgm)");
  }
}

}  // namespace ddpore::dataprep
