#include <png.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>

#include "doctest.h"

#include "ddpore/dataprep/dataset.hpp"
#include "ddpore/dataprep/image.hpp"
#include "ddpore/dataprep/labels.hpp"
#include "ddpore/dataprep/patches.hpp"
#include "ddpore/dataprep/pores.hpp"
#include "ddpore/dataprep/synth.hpp"
#include "ddpore/io.hpp"

using namespace ddpore::dataprep;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / "ddpore_test_dataprep";
  fs::create_directories(dir);
  return dir / name;
}

Image8 random_image(std::int64_t rows, std::int64_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image8 img(rows, cols);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

template <typename E>
bool throws_exactly(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const E&) {
    return true;
  } catch (...) {
    return false;
  }
  return false;
}

bool is_unsupported_depth(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ddpore::UnsupportedDepthError&) {
    return true;
  } catch (...) {
  }
  return false;
}

std::vector<std::uint8_t> png_bytes(std::uint32_t rows, std::uint32_t cols, std::uint32_t format,
                                    std::size_t bytes_per_pixel) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = cols;
  png.height = rows;
  png.format = format;
  std::vector<std::uint8_t> raster(rows * cols * bytes_per_pixel, 0x40);
  png_alloc_size_t size = 0;
  REQUIRE(png_image_write_to_memory(&png, nullptr, &size, 0, raster.data(), 0, nullptr) != 0);
  std::vector<std::uint8_t> out(size);
  REQUIRE(png_image_write_to_memory(&png, out.data(), &size, 0, raster.data(), 0, nullptr) != 0);
  out.resize(size);
  return out;
}

}  // namespace

// ---------------------------------------------------------------- labels

TEST_CASE("label image examples") {
  const auto img = pore_label_image({{10, 10}}, 30, 30);
  CHECK(img(10, 10) == 1.0);
  CHECK(label_at_distance(2.5) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(img(10, 12) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(img(13, 14) == 0.0);  // distance exactly 5
  CHECK(img(10, 15) == 0.0);
  CHECK(img(0, 0) == 0.0);
}

TEST_CASE("label image on a 50-case grid around an isolated pore") {
  const Pore p{20, 20};
  const auto img = pore_label_image({p}, 41, 41);
  int cases = 0;
  for (std::int64_t dr = 0; dr <= 6; ++dr) {
    for (std::int64_t dc = dr; dc <= 7 && cases < 50; ++dc, ++cases) {
      const double d = std::sqrt(static_cast<double>(dr * dr + dc * dc));
      const double expected = d < 5.0 ? 1.0 - d / 5.0 : 0.0;
      for (auto [sr, sc] : {std::pair{1, 1}, {1, -1}, {-1, 1}, {-1, -1}}) {
        CHECK(std::abs(img(p.row + sr * dr, p.col + sc * dc) - expected) <= 1e-9);
        CHECK(std::abs(img(p.row + sr * dc, p.col + sc * dr) - expected) <= 1e-9);
      }
    }
  }
  CHECK(cases == 35);
  // remaining cases: a second pore at a far corner and pixels on the axis
  const auto two = pore_label_image({p, {2, 38}}, 41, 41);
  for (std::int64_t k = 0; k < 15; ++k) {
    const double expected = k < 5 ? 1.0 - static_cast<double>(k) / 5.0 : 0.0;
    CHECK(std::abs(two(2 + k, 38) - expected) <= 1e-9);
  }
}

TEST_CASE("label image depends only on the nearest pore, in any order") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::set<Pore> unique;
    while (unique.size() < 12) unique.insert({static_cast<std::int64_t>(rng() % 40), static_cast<std::int64_t>(rng() % 50)});
    PoreList pores(unique.begin(), unique.end());
    const auto img = pore_label_image(pores, 40, 50);
    std::shuffle(pores.begin(), pores.end(), rng);
    CHECK(pore_label_image(pores, 40, 50) == img);
    for (std::int64_t r = 0; r < 40; ++r) {
      for (std::int64_t c = 0; c < 50; ++c) {
        double nearest = 1e9;
        for (const auto& q : pores) nearest = std::min(nearest, std::hypot(double(r - q.row), double(c - q.col)));
        CHECK(img(r, c) == label_at_distance(nearest));
        CHECK(img(r, c) >= 0.0);
        CHECK(img(r, c) <= 1.0);
      }
    }
    for (const auto& q : pores) CHECK(img(q.row, q.col) == 1.0);
  }
  // non-increasing in distance
  double prev = 2.0;
  for (double d = 0.0; d < 7.0; d += 0.01) {
    CHECK(label_at_distance(d) <= prev);
    prev = label_at_distance(d);
  }
}

TEST_CASE("label image rejects out-of-bounds pores") {
  CHECK_THROWS_AS(pore_label_image({{30, 0}}, 30, 30), ddpore::BoundsError);
  CHECK_THROWS_AS(pore_label_image({{0, -1}}, 30, 30), ddpore::BoundsError);
}

// ---------------------------------------------------------------- patches

TEST_CASE("patch count identities") {
  CHECK(overlapping_patch_count(480, 640) == 57 * 41);
  CHECK(overlapping_offsets(480, 640).size() == 2337);
  CHECK(90 * overlapping_patch_count(480, 640) == 210330);
  CHECK(nonoverlapping_patch_count(240, 320) == 12);
  CHECK(780 * 8 * nonoverlapping_patch_count(240, 320) == 74880);
  CHECK(overlapping_patch_count(240, 320) == 25 * 17);
  CHECK(5 * overlapping_patch_count(240, 320) == 2125);
  CHECK(overlapping_patch_count(80, 80) == 1);
  CHECK(overlapping_offsets(90, 80) == std::vector<PatchOffset>{{0, 0}, {10, 0}});
  CHECK(nonoverlapping_patch_count(160, 160) == 4);
  CHECK_THROWS_AS(overlapping_offsets(79, 200), ddpore::ShapeError);
  for (std::int64_t rows = 80; rows < 200; rows += 7) {
    for (std::int64_t cols = 80; cols < 200; cols += 11) {
      CHECK(overlapping_patch_count(rows, cols) ==
            static_cast<std::int64_t>(overlapping_offsets(rows, cols).size()));
    }
  }
}

TEST_CASE("overlapping patches copy the right pixels") {
  const auto img = random_image(100, 95, 1);
  const auto patches = extract_patches_overlapping(img);
  REQUIRE(patches.size() == 3 * 2);
  for (const auto& p : patches) {
    CHECK(p.pixels.rows == 80);
    for (std::int64_t r = 0; r < 80; r += 13) {
      for (std::int64_t c = 0; c < 80; c += 7) CHECK(p.pixels(r, c) == img(p.offset.row + r, p.offset.col + c));
    }
  }
}

TEST_CASE("non-overlapping tiling pads by reflection and stitches back exactly") {
  SUBCASE("exact tiling needs no padding") {
    TileLayout layout;
    const auto img = random_image(160, 160, 2);
    const auto tiles = extract_patches_nonoverlapping(img, layout);
    CHECK(tiles.size() == 4);
    CHECK(layout.padded_rows == 160);
    CHECK(stitch(tiles, layout) == img);
  }
  SUBCASE("100x100 pads to 160x160") {
    TileLayout layout;
    const auto img = random_image(100, 100, 3);
    const auto tiles = extract_patches_nonoverlapping(img, layout);
    CHECK(tiles.size() == 4);
    CHECK(layout.padded_rows == 160);
    CHECK(layout.padded_cols == 160);
    // mirror without edge repetition
    CHECK(tiles[1].pixels(0, 20) == img(0, 98));
    CHECK(tiles[2].pixels(20, 5) == img(98, 5));
    CHECK(stitch(tiles, layout) == img);
  }
  SUBCASE("round trip over many sizes, tiles in any order") {
    std::mt19937_64 rng(4);
    for (std::int64_t rows : {1, 7, 30, 80, 81, 159, 240}) {
      for (std::int64_t cols : {1, 13, 79, 80, 100, 320}) {
        TileLayout layout;
        const auto img = random_image(rows, cols, static_cast<std::uint64_t>(rows * 1000 + cols));
        auto tiles = extract_patches_nonoverlapping(img, layout);
        CHECK(static_cast<std::int64_t>(tiles.size()) == nonoverlapping_patch_count(rows, cols));
        std::shuffle(tiles.begin(), tiles.end(), rng);
        CHECK(stitch(tiles, layout) == img);
      }
    }
  }
}

// ---------------------------------------------------------------- domains

TEST_CASE("domain labels") {
  CHECK(assign_domain(Domain::source) == 0);
  CHECK(assign_domain(Domain::target) == 1);
  CHECK(parse_domain("target") == Domain::target);
  CHECK_THROWS_AS(parse_domain("other"), ddpore::ConfigError);
}

// ---------------------------------------------------------------- pores files

TEST_CASE("pores text format") {
  CHECK(parse_pores("12 34\n56 78\n") == PoreList{{12, 34}, {56, 78}});
  CHECK(parse_pores("").empty());
  CHECK(parse_pores("\n  \n3\t4\n") == PoreList{{3, 4}});
  CHECK(parse_pores("5 6") == PoreList{{5, 6}});

  CHECK(throws_exactly<ddpore::BoundsError>([] { parse_pores("400 10\n", 240, 320); }));
  CHECK(throws_exactly<ddpore::BoundsError>([] { parse_pores("10 400\n", 240, 320); }));
  for (const char* bad : {"1\n", "1 2 3\n", "a b\n", "1.5 2\n", "1 2x\n"}) {
    CHECK(throws_exactly<ddpore::FormatError>([&] { parse_pores(bad); }));
  }
  CHECK(throws_exactly<ddpore::FormatError>([] { parse_pores("1 2\n1 2\n"); }));
  try {
    parse_pores("1 2\n3 x\n");
  } catch (const ddpore::FormatError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
}

TEST_CASE("pores file round trip") {
  const PoreList pores{{0, 0}, {5, 319}, {239, 7}};
  const auto path = scratch("a.pores");
  save_pores(pores, path);
  CHECK(load_ground_truth(path, 240, 320) == pores);
  CHECK(format_pores(load_ground_truth(path)) == ddpore::read_text_file(path));
  CHECK_THROWS_AS(load_ground_truth(scratch("missing.pores")), ddpore::IoError);
}

// ---------------------------------------------------------------- images

TEST_CASE("PGM and PNG round trips are lossless") {
  for (auto [rows, cols] : {std::pair<std::int64_t, std::int64_t>{1, 1}, {240, 320}, {37, 80}}) {
    const auto img = random_image(rows, cols, static_cast<std::uint64_t>(rows + cols));
    CHECK(decode_pgm(encode_pgm(img)) == img);
    CHECK(decode_png(encode_png(img)) == img);
    for (const char* ext : {".pgm", ".png"}) {
      const auto path = scratch(std::string("img") + ext);
      save_image(img, path);
      const auto loaded = load_image(path);
      CHECK(loaded.pixels == img);
      CHECK(loaded.id == "img");
    }
  }
}

TEST_CASE("PGM header parsing") {
  const std::string text = "P5\n# comment\n3 2\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  for (std::uint8_t v = 1; v <= 6; ++v) bytes.push_back(v);
  const auto img = decode_pgm(bytes);
  CHECK(img.rows == 2);
  CHECK(img.cols == 3);
  CHECK(img(1, 2) == 6);
  bytes.pop_back();
  CHECK(throws_exactly<ddpore::FormatError>([&] { decode_pgm(bytes); }));
}

TEST_CASE("unsupported depths and malformed images raise distinct errors") {
  Plane<std::uint16_t> deep(2, 2, 1000);
  const auto pgm16 = encode_pgm16(deep);
  CHECK(is_unsupported_depth([&] { decode_pgm(pgm16); }));
  CHECK(is_unsupported_depth([] { decode_png(png_bytes(4, 4, PNG_FORMAT_LINEAR_Y, 2)); }));
  CHECK(is_unsupported_depth([] { decode_png(png_bytes(4, 4, PNG_FORMAT_RGB, 3)); }));
  CHECK(decode_png(png_bytes(4, 4, PNG_FORMAT_GRAY, 1)) == Image8(4, 4, 0x40));

  const std::string junk = "not an image at all";
  const std::vector<std::uint8_t> bytes(junk.begin(), junk.end());
  CHECK(throws_exactly<ddpore::FormatError>([&] { decode_pgm(bytes); }));
  CHECK_FALSE(is_unsupported_depth([&] { decode_pgm(bytes); }));

  const auto path = scratch("deep.pgm");
  ddpore::write_file_atomic(path, pgm16);
  CHECK(is_unsupported_depth([&] { load_image(path); }));
  CHECK_THROWS_AS(save_image(Image8(2, 2), scratch("x.bmp")), ddpore::ConfigError);
}

TEST_CASE("16-bit PGM encoding is big-endian") {
  Plane<std::uint16_t> img(1, 2);
  img.data = {0x0102, 0xfffe};
  const auto bytes = encode_pgm16(img);
  const std::string header = "P5\n2 1\n65535\n";
  REQUIRE(bytes.size() == header.size() + 4);
  CHECK(std::equal(header.begin(), header.end(), bytes.begin()));
  CHECK(bytes[header.size()] == 0x01);
  CHECK(bytes[header.size() + 3] == 0xfe);
  CHECK(decode_pgm16(bytes) == img);
  CHECK_THROWS_AS(decode_pgm16(encode_pgm(Image8(2, 2))), ddpore::FormatError);
  CHECK_THROWS_AS(decode_pgm16(std::span(bytes).first(bytes.size() - 1)), ddpore::FormatError);
}

TEST_CASE("to_unit divides by 255") {
  Image8 img(1, 3);
  img.data = {0, 51, 255};
  const auto u = to_unit(img);
  CHECK(u.data[0] == 0.0f);
  CHECK(u.data[1] == doctest::Approx(0.2));
  CHECK(u.data[2] == 1.0f);
}

// ---------------------------------------------------------------- manifest

TEST_CASE("manifest round trip and validation") {
  const auto dir = scratch("manifest_case");
  fs::create_directories(dir / "imgs");
  const auto img = random_image(80, 80, 9);
  save_image(img, dir / "imgs" / "a.png");
  save_pores({{1, 2}}, dir / "imgs" / "a.pores");
  save_image(img, dir / "imgs" / "b.pgm");

  const std::vector<ManifestEntry> entries{
      {dir / "imgs" / "a.png", dir / "imgs" / "a.pores", Domain::source},
      {dir / "imgs" / "b.pgm", std::nullopt, Domain::target}};
  save_manifest(entries, dir / "m.json");
  const auto text = ddpore::read_text_file(dir / "m.json");
  CHECK(text.find("\"imgs/a.png\"") != std::string::npos);
  CHECK(load_manifest(dir / "m.json") == entries);

  const auto data = load_dataset(dir / "m.json");
  REQUIRE(data.size() == 2);
  CHECK(data[0].pores == PoreList{{1, 2}});
  CHECK(data[0].image.pixels == img);
  CHECK_FALSE(data[1].pores.has_value());
  CHECK(data[1].domain == Domain::target);

  ddpore::write_file_atomic(dir / "bad.json", std::string(R"([{"image":"imgs/b.pgm","domain":"source"}])"));
  CHECK_THROWS_AS(load_dataset(dir / "bad.json"), ddpore::ConfigError);
  ddpore::write_file_atomic(dir / "bad2.json", std::string(R"([{"image":"imgs/b.pgm","domain":"target","x":1}])"));
  CHECK_THROWS_AS(load_manifest(dir / "bad2.json"), ddpore::ConfigError);
  ddpore::write_file_atomic(dir / "bad3.json", std::string("{"));
  CHECK_THROWS_AS(load_manifest(dir / "bad3.json"), ddpore::FormatError);
}

// ---------------------------------------------------------------- synthesis

TEST_CASE("synthetic images are deterministic and well formed") {
  SynthConfig cfg;
  cfg.count = 5;
  const auto a = synth_images(cfg, 7);
  const auto b = synth_images(cfg, 7);
  const auto c = synth_images(cfg, 8);
  REQUIRE(a.size() == 5);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.pixels == b[i].image.pixels);
    CHECK(a[i].pores == b[i].pores);
    CHECK(a[i].image.pixels.rows == 160);
    CHECK(a[i].image.pixels.cols == 160);
    CHECK(std::is_sorted(a[i].pores.begin(), a[i].pores.end()));
    CHECK(std::adjacent_find(a[i].pores.begin(), a[i].pores.end()) == a[i].pores.end());
    CHECK(a[i].pores.size() == 128);  // density * area / period
    const auto labels = pore_label_image(a[i].pores, 160, 160);
    for (const auto& p : a[i].pores) CHECK(labels(p.row, p.col) == 1.0);
  }
  CHECK(a[0].image.pixels != c[0].image.pixels);

  const auto pair1 = synth_domain_pair(cfg, cfg, 3);
  const auto pair2 = synth_domain_pair(cfg, cfg, 3);
  CHECK(pair1.source[0].image.pixels == pair2.source[0].image.pixels);
  CHECK(pair1.target[4].image.pixels == pair2.target[4].image.pixels);
  CHECK(pair1.source[0].image.pixels != pair1.target[0].image.pixels);
}

TEST_CASE("every synthetic pore sits on a local intensity maximum") {
  for (double period : {9.0, 10.0, 12.0, 13.0}) {
    SynthConfig cfg;
    cfg.count = 5;
    cfg.noise_sigma = 0.0;
    cfg.ridge_period = period;
    cfg.pore_radius_min = 0.12 * period;
    cfg.pore_radius_max = 0.2 * period;
    for (const auto& s : synth_images(cfg, 11)) {
      const auto& px = s.image.pixels;
      for (const auto& p : s.pores) {
        for (std::int64_t dr = -1; dr <= 1; ++dr) {
          for (std::int64_t dc = -1; dc <= 1; ++dc) {
            if (px.contains(p.row + dr, p.col + dc)) CHECK(px(p.row + dr, p.col + dc) <= px(p.row, p.col));
          }
        }
      }
    }
  }
}

TEST_CASE("blob size follows the configured radius ratio") {
  // Blob-only rendering: no ridges, no noise.
  auto measure = [](SynthConfig cfg) {
    cfg.count = 5;
    cfg.valley_level = 0.0;
    cfg.ridge_contrast = 0.0;
    cfg.noise_sigma = 0.0;
    cfg.blob_contrast = 200.0;
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& s : synth_images(cfg, 21)) {
      const auto reach = static_cast<std::int64_t>(std::ceil(cfg.pore_radius_max)) + 1;
      for (const auto& p : s.pores) {
        int area = 0;
        for (std::int64_t r = p.row - reach; r <= p.row + reach; ++r) {
          for (std::int64_t c = p.col - reach; c <= p.col + reach; ++c) {
            if (s.image.pixels.contains(r, c) && s.image.pixels(r, c) > 100) ++area;
          }
        }
        total += 2.0 * std::sqrt(area / M_PI);
        ++n;
      }
    }
    return total / static_cast<double>(n);
  };
  SynthConfig src;
  src.ridge_period = 9.0;
  src.pore_radius_min = 1.2;
  src.pore_radius_max = 1.8;
  SynthConfig tgt = src;
  tgt.ridge_period = 12.0;
  tgt.pore_radius_min = 1.6;
  tgt.pore_radius_max = 2.4;
  const double ratio = measure(tgt) / measure(src);
  INFO("measured diameter ratio " << ratio);
  CHECK(ratio == doctest::Approx(12.0 / 9.0).epsilon(0.1));
}

TEST_CASE("synthesis configuration errors") {
  SynthConfig cfg;
  cfg.count = 0;
  try {
    synth_images(cfg, 0);
    FAIL("expected ConfigError");
  } catch (const ddpore::ConfigError& e) {
    CHECK(std::string(e.what()).find("count") != std::string::npos);
  }
  cfg = SynthConfig{};
  cfg.pore_radius_max = 6.0;
  CHECK_THROWS_AS(synth_images(cfg, 0), ddpore::ConfigError);
  cfg = SynthConfig{};
  cfg.pore_density = 1.0;
  CHECK_THROWS_AS(synth_images(cfg, 0), ddpore::ConfigError);

  nlohmann::ordered_json j = SynthConfig{};
  CHECK(j.get<SynthConfig>() == SynthConfig{});
  j["ridge_periodd"] = 3;
  CHECK_THROWS_AS(j.get<SynthConfig>(), ddpore::ConfigError);
  nlohmann::ordered_json partial{{"count", 3}};
  CHECK(partial.get<SynthConfig>().count == 3);
}
