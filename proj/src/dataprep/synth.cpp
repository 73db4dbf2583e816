#include "ddpore/dataprep/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "ddpore/json_fields.hpp"

namespace ddpore::dataprep {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
// Raised-cosine ridge profile scaled by this and clipped at full depth, so
// each ridge has a flat dark core about 0.36 periods wide.
constexpr double kRidgeCore = 1.4;

void require_field(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ConfigError("synth config: " + field + " " + rule);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  return std::mt19937_64(seq);
}

// Ridge phase: integer values lie on ridge centrelines.
struct PhaseField {
  double cos_t = 1.0;
  double sin_t = 0.0;
  double period = 9.0;
  double wobble = 0.0;       // amplitude in periods
  double wavelength = 90.0;  // of the wobble, px
  double offset = 0.0;

  double arg(double y, double x) const { return kTwoPi * (-x * sin_t + y * cos_t) / wavelength + offset; }

  double value(double y, double x) const {
    return (x * cos_t + y * sin_t) / period + wobble * std::sin(arg(y, x));
  }

  // (d/dy, d/dx)
  std::pair<double, double> gradient(double y, double x) const {
    const double k = wobble * kTwoPi / wavelength * std::cos(arg(y, x));
    return {sin_t / period + k * cos_t, cos_t / period - k * sin_t};
  }
};

struct Blob {
  Pore centre;
  double major = 0.0;
  double minor = 0.0;
  double angle = 0.0;
};

SynthImage render(const SynthConfig& cfg, std::uint64_t seed, std::uint64_t salt, std::int64_t index) {
  auto rng = stream(seed, salt, static_cast<std::uint64_t>(index), 0);
  auto orient_rng = stream(seed, cfg.orientation_seed, static_cast<std::uint64_t>(index), 1);
  auto noise_rng = stream(seed, salt, static_cast<std::uint64_t>(index), 2);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  PhaseField phase;
  const double theta = std::numbers::pi * unit(orient_rng);
  phase.cos_t = std::cos(theta);
  phase.sin_t = std::sin(theta);
  phase.period = cfg.ridge_period;
  phase.wobble = cfg.ridge_curvature;
  phase.wavelength = 60.0 + 60.0 * unit(orient_rng);
  phase.offset = kTwoPi * unit(orient_rng);

  const double area = static_cast<double>(cfg.rows * cfg.cols);
  const auto wanted = static_cast<std::int64_t>(std::llround(cfg.pore_density * area / cfg.ridge_period));
  const double min_sep = 2.0 * cfg.pore_radius_max + 3.0;
  const std::int64_t margin = 2;
  const std::int64_t max_attempts = 200 * wanted + 200;

  std::vector<Blob> blobs;
  for (std::int64_t attempt = 0;
       attempt < max_attempts && static_cast<std::int64_t>(blobs.size()) < wanted; ++attempt) {
    double y = static_cast<double>(margin) + unit(rng) * static_cast<double>(cfg.rows - 1 - 2 * margin);
    double x = static_cast<double>(margin) + unit(rng) * static_cast<double>(cfg.cols - 1 - 2 * margin);
    for (int it = 0; it < 4; ++it) {
      const double f = phase.value(y, x);
      const auto [gy, gx] = phase.gradient(y, x);
      const double step = (f - std::round(f)) / (gy * gy + gx * gx);
      y -= step * gy;
      x -= step * gx;
    }
    const Pore p{static_cast<std::int64_t>(std::lround(y)), static_cast<std::int64_t>(std::lround(x))};
    if (p.row < margin || p.col < margin || p.row >= cfg.rows - margin || p.col >= cfg.cols - margin) continue;
    const bool clear = std::all_of(blobs.begin(), blobs.end(), [&](const Blob& b) {
      return std::hypot(static_cast<double>(b.centre.row - p.row), static_cast<double>(b.centre.col - p.col)) >= min_sep;
    });
    if (!clear) continue;
    Blob b;
    b.centre = p;
    b.major = cfg.pore_radius_min + (cfg.pore_radius_max - cfg.pore_radius_min) * unit(rng);
    b.minor = b.major * (0.7 + 0.3 * unit(rng));
    b.angle = std::numbers::pi * unit(rng);
    blobs.push_back(b);
  }
  if (static_cast<std::int64_t>(blobs.size()) < wanted) {
    throw ConfigError("synth config: pore_density too high, placed " + std::to_string(blobs.size()) +
                      " of " + std::to_string(wanted) + " pores after " + std::to_string(max_attempts) +
                      " attempts");
  }

  Plane<double> field(cfg.rows, cfg.cols);
  for (std::int64_t r = 0; r < cfg.rows; ++r) {
    for (std::int64_t c = 0; c < cfg.cols; ++c) {
      const double f = phase.value(static_cast<double>(r), static_cast<double>(c));
      const double depth = std::min(1.0, kRidgeCore * 0.5 * (1.0 + std::cos(kTwoPi * f)));
      field(r, c) = cfg.valley_level - cfg.ridge_contrast * depth;
    }
  }
  // Elliptical bump reaching half its peak on the ellipse with semi-axes
  // (major, minor).
  for (const Blob& b : blobs) {
    const auto reach = static_cast<std::int64_t>(std::ceil(3.0 * b.major));
    const double ca = std::cos(b.angle);
    const double sa = std::sin(b.angle);
    for (std::int64_t r = std::max<std::int64_t>(0, b.centre.row - reach);
         r <= std::min(cfg.rows - 1, b.centre.row + reach); ++r) {
      for (std::int64_t c = std::max<std::int64_t>(0, b.centre.col - reach);
           c <= std::min(cfg.cols - 1, b.centre.col + reach); ++c) {
        const double dy = static_cast<double>(r - b.centre.row);
        const double dx = static_cast<double>(c - b.centre.col);
        const double u = (dx * ca + dy * sa) / b.major;
        const double v = (-dx * sa + dy * ca) / b.minor;
        field(r, c) += cfg.blob_contrast * std::exp2(-(u * u + v * v));
      }
    }
  }

  SynthImage out;
  out.image.id = "img" + std::to_string(index);
  out.image.dpi = cfg.dpi;
  out.image.pixels = Image8(cfg.rows, cfg.cols);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < field.data.size(); ++i) {
    double v = field.data[i];
    if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * noise(noise_rng);
    out.image.pixels.data[i] = static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0));
  }

  std::vector<std::size_t> order(blobs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return blobs[a].centre < blobs[b].centre; });
  for (std::size_t k : order) {
    out.pores.push_back(blobs[k].centre);
    out.radii.push_back(blobs[k].major);
  }
  return out;
}

std::vector<SynthImage> render_all(const SynthConfig& cfg, std::uint64_t seed, std::uint64_t salt) {
  cfg.validate();
  std::vector<SynthImage> out;
  out.reserve(static_cast<std::size_t>(cfg.count));
  for (std::int64_t i = 0; i < cfg.count; ++i) out.push_back(render(cfg, seed, salt, i));
  return out;
}

}  // namespace

void SynthConfig::validate() const {
  require_field(rows > 0, "rows", "must be positive");
  require_field(cols > 0, "cols", "must be positive");
  require_field(count > 0, "count", "must be positive");
  require_field(ridge_period > 0.0, "ridge_period", "must be positive");
  require_field(ridge_curvature >= 0.0, "ridge_curvature", "must be nonnegative");
  require_field(pore_radius_min > 0.0, "pore_radius_min", "must be positive");
  require_field(pore_radius_max >= pore_radius_min, "pore_radius_max", "must be >= pore_radius_min");
  require_field(pore_radius_max < ridge_period / 2.0, "pore_radius_max", "must be below ridge_period / 2");
  require_field(pore_density > 0.0, "pore_density", "must be positive");
  require_field(valley_level >= 0.0 && valley_level <= 255.0, "valley_level", "must lie in [0, 255]");
  require_field(ridge_contrast >= 0.0, "ridge_contrast", "must be nonnegative");
  require_field(blob_contrast >= 0.0, "blob_contrast", "must be nonnegative");
  require_field(noise_sigma >= 0.0, "noise_sigma", "must be nonnegative");
  require_field(dpi > 0, "dpi", "must be positive");
}

void to_json(nlohmann::ordered_json& j, const SynthConfig& cfg) {
  j = nlohmann::ordered_json{{"rows", cfg.rows},
                             {"cols", cfg.cols},
                             {"count", cfg.count},
                             {"ridge_period", cfg.ridge_period},
                             {"orientation_seed", cfg.orientation_seed},
                             {"ridge_curvature", cfg.ridge_curvature},
                             {"pore_radius_min", cfg.pore_radius_min},
                             {"pore_radius_max", cfg.pore_radius_max},
                             {"pore_density", cfg.pore_density},
                             {"valley_level", cfg.valley_level},
                             {"ridge_contrast", cfg.ridge_contrast},
                             {"blob_contrast", cfg.blob_contrast},
                             {"noise_sigma", cfg.noise_sigma},
                             {"dpi", cfg.dpi}};
}

void from_json(const nlohmann::ordered_json& j, SynthConfig& cfg) {
  JsonFields f(j, "synth config");
  f.get("rows", cfg.rows).get("cols", cfg.cols).get("count", cfg.count);
  f.get("ridge_period", cfg.ridge_period).get("orientation_seed", cfg.orientation_seed);
  f.get("ridge_curvature", cfg.ridge_curvature);
  f.get("pore_radius_min", cfg.pore_radius_min).get("pore_radius_max", cfg.pore_radius_max);
  f.get("pore_density", cfg.pore_density).get("valley_level", cfg.valley_level);
  f.get("ridge_contrast", cfg.ridge_contrast).get("blob_contrast", cfg.blob_contrast);
  f.get("noise_sigma", cfg.noise_sigma).get("dpi", cfg.dpi);
  f.finish();
}

std::vector<SynthImage> synth_images(const SynthConfig& cfg, std::uint64_t seed) {
  return render_all(cfg, seed, 0);
}

DomainPair synth_domain_pair(const SynthConfig& source, const SynthConfig& target, std::uint64_t seed) {
  return {render_all(source, seed, 1), render_all(target, seed, 2)};
}

}  // namespace ddpore::dataprep
