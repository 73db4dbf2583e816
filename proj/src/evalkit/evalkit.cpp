#include "ddpore/evalkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace ddpore::evalkit {

namespace {

std::int64_t dist2(const dataprep::Pore& a, const dataprep::Pore& b) {
  const std::int64_t dr = a.row - b.row;
  const std::int64_t dc = a.col - b.col;
  return dr * dr + dc * dc;
}

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

nlohmann::ordered_json rates_json(const Rates& r) {
  return {{"R_T", r.rt}, {"R_F", r.rf}, {"precision", r.precision}, {"recall", r.recall}, {"F", r.f}};
}

}  // namespace

MatchResult match_pores(const PoreList& detected, const PoreList& gt) {
  const auto n = static_cast<std::int64_t>(detected.size());
  const auto m = static_cast<std::int64_t>(gt.size());
  MatchResult out;
  out.nearest_gt.assign(static_cast<std::size_t>(n), -1);
  out.mutual.assign(static_cast<std::size_t>(n), 0);
  std::vector<std::uint8_t> hit(static_cast<std::size_t>(m), 0);

  // Nearest detection of each GT pore, computed once.
  std::vector<std::int64_t> nearest_det(static_cast<std::size_t>(m), -1);
  for (std::int64_t j = 0; j < m; ++j) {
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto d = dist2(detected[static_cast<std::size_t>(i)], gt[static_cast<std::size_t>(j)]);
      if (d < best) {
        best = d;
        nearest_det[static_cast<std::size_t>(j)] = i;
      }
    }
  }
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    std::int64_t jb = -1;
    for (std::int64_t j = 0; j < m; ++j) {
      const auto d = dist2(detected[static_cast<std::size_t>(i)], gt[static_cast<std::size_t>(j)]);
      if (d < best) {
        best = d;
        jb = j;
      }
    }
    out.nearest_gt[static_cast<std::size_t>(i)] = jb;
    if (jb >= 0 && nearest_det[static_cast<std::size_t>(jb)] == i) {
      out.mutual[static_cast<std::size_t>(i)] = 1;
      out.true_detections.push_back(i);
      hit[static_cast<std::size_t>(jb)] = 1;
    } else {
      out.false_detections.push_back(i);
    }
  }
  for (std::int64_t j = 0; j < m; ++j) {
    (hit[static_cast<std::size_t>(j)] ? out.hit_gt : out.missed_gt).push_back(j);
  }
  return out;
}

Counts& Counts::operator+=(const Counts& o) {
  detections += o.detections;
  ground_truth += o.ground_truth;
  true_detections += o.true_detections;
  return *this;
}

Rates rates_from_counts(const Counts& c) {
  if (c.detections < 0 || c.ground_truth < 0 || c.true_detections < 0 ||
      c.true_detections > c.detections || c.true_detections > c.ground_truth) {
    throw std::logic_error("inconsistent detection counts");
  }
  Rates r;
  r.recall = ratio(c.true_detections, c.ground_truth);
  r.rt = r.recall;
  r.rf = ratio(c.false_detections(), c.detections);
  // No detections: R_F = 0, so precision = 1 - R_F = 1 and F = 0 since
  // recall is 0 as well.
  r.precision = 1.0 - r.rf;
  r.f = harmonic(r.precision, r.recall);
  return r;
}

DetectionReport aggregate(std::span<const Counts> per_image, double threshold) {
  DetectionReport rep;
  rep.threshold = threshold;
  rep.images = static_cast<std::int64_t>(per_image.size());
  rep.per_image.assign(per_image.begin(), per_image.end());
  for (const auto& c : per_image) {
    rep.counts += c;
    const Rates r = rates_from_counts(c);
    rep.macro.rt += r.rt;
    rep.macro.rf += r.rf;
    rep.macro.precision += r.precision;
    rep.macro.recall += r.recall;
    rep.macro.f += r.f;
  }
  if (rep.images > 0) {
    const auto k = static_cast<double>(rep.images);
    rep.macro.rt /= k;
    rep.macro.rf /= k;
    rep.macro.precision /= k;
    rep.macro.recall /= k;
    rep.macro.f /= k;
  }
  rep.micro = rates_from_counts(rep.counts);
  check_identities(rep);
  return rep;
}

DetectionReport compute_metrics(const MatchResult& match, std::int64_t total_gt, double threshold) {
  if (match.true_detections.size() + match.false_detections.size() != match.nearest_gt.size()) {
    throw std::logic_error("match result does not partition the detections");
  }
  if (static_cast<std::int64_t>(match.hit_gt.size() + match.missed_gt.size()) != total_gt) {
    throw std::logic_error("total_gt does not match the match result");
  }
  const Counts c{static_cast<std::int64_t>(match.nearest_gt.size()), total_gt,
                 static_cast<std::int64_t>(match.true_detections.size())};
  return aggregate(std::span(&c, 1), threshold);
}

void check_identities(const DetectionReport& report) {
  constexpr double tol = 1e-12;
  auto check = [](const Rates& r, bool harmonic_f, const char* which) {
    const auto fail = [&](const std::string& what) {
      throw std::logic_error(std::string(which) + " report: " + what);
    };
    if (std::abs(r.rt - r.recall) > tol) fail("R_T != recall");
    if (std::abs(r.rf - (1.0 - r.precision)) > tol) fail("R_F != 1 - precision");
    for (double v : {r.rt, r.rf, r.precision, r.recall, r.f}) {
      if (!(v >= -tol && v <= 1.0 + tol)) fail("rate outside [0, 1]");
    }
    if (harmonic_f && std::abs(r.f - harmonic(r.precision, r.recall)) > tol) fail("F != 2PR/(P+R)");
  };
  check(report.micro, true, "micro");
  // Means of per-image rates keep the linear identities but not the
  // harmonic one.
  check(report.macro, false, "macro");
}

nlohmann::ordered_json to_json(const DetectionReport& report) {
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& c : report.per_image) {
    per.push_back({{"detections", c.detections},
                   {"ground_truth", c.ground_truth},
                   {"true_detections", c.true_detections},
                   {"false_detections", c.false_detections()}});
  }
  return {{"threshold", report.threshold},
          {"images", report.images},
          {"counts",
           {{"detections", report.counts.detections},
            {"ground_truth", report.counts.ground_truth},
            {"true_detections", report.counts.true_detections},
            {"false_detections", report.counts.false_detections()}}},
          {"micro", rates_json(report.micro)},
          {"macro", rates_json(report.macro)},
          {"per_image", per}};
}

// ---------------------------------------------------------------------------
// ROC

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 99; ++k) g.push_back(k / 100.0);
  return g;
}

std::vector<double> parse_grid(const std::string& text) {
  double a = 0.0, b = 0.0, step = 0.0;
  char tail = 0;
  if (std::sscanf(text.c_str(), "%lf:%lf:%lf%c", &a, &b, &step, &tail) != 3) {
    throw ConfigError("grid must look like start:stop:step, got '" + text + "'");
  }
  if (!(step > 0.0) || !(b >= a) || !std::isfinite(a) || !std::isfinite(b)) {
    throw ConfigError("grid '" + text + "' needs step > 0 and stop >= start");
  }
  const auto n = static_cast<std::int64_t>(std::floor((b - a) / step + 1e-9)) + 1;
  if (n > 1000000) throw ConfigError("grid '" + text + "' has too many points");
  std::vector<double> g;
  for (std::int64_t k = 0; k < n; ++k) {
    // Rounded to 12 decimals so 0.01:0.99:0.01 gives the same values as k / 100.
    g.push_back(std::round((a + static_cast<double>(k) * step) * 1e12) / 1e12);
  }
  return g;
}

RocCurve roc_from_maps(std::span<const detector::IntensityMap> maps, std::span<const PoreList> gt,
                       std::span<const double> grid) {
  if (grid.empty()) throw ConfigError("threshold grid is empty");
  if (maps.size() != gt.size()) throw ConfigError("need one ground-truth list per map");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw ConfigError("threshold grid must be strictly increasing");
  }
  std::vector<std::vector<detector::DetectedPore>> maxima;
  for (const auto& m : maps) {
    maxima.push_back(detector::local_maxima(m, -std::numeric_limits<double>::infinity()));
  }
  RocCurve curve;
  for (double th : grid) {
    std::vector<Counts> per;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      PoreList kept;
      for (const auto& p : maxima[i]) {
        if (static_cast<double>(p.intensity) > th) kept.push_back({p.row, p.col});
      }
      const auto match = match_pores(kept, gt[i]);
      per.push_back({static_cast<std::int64_t>(kept.size()), static_cast<std::int64_t>(gt[i].size()),
                     static_cast<std::int64_t>(match.true_detections.size())});
    }
    curve.points.push_back(aggregate(per, th));
  }
  return curve;
}

RocCurve roc_sweep(porenet::PoreModel<float>& model, std::span<const dataprep::Image8> images,
                   std::span<const PoreList> gt, std::span<const double> grid) {
  std::vector<detector::IntensityMap> maps;
  for (const auto& img : images) maps.push_back(detector::predict_map(model, img));
  return roc_from_maps(maps, gt, grid);
}

std::string roc_csv(const RocCurve& curve) {
  std::string out(kRocHeader);
  out += '\n';
  char buf[256];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.6g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", p.threshold, p.micro.rt,
                  p.micro.rf, p.micro.f, p.macro.rt, p.macro.rf, p.macro.f);
    out += buf;
  }
  return out;
}

OperatingPoint operating_point(const RocCurve& curve, double target_rf, Aggregation agg) {
  if (curve.points.empty()) throw ConfigError("ROC curve is empty");
  auto pick = [&](const DetectionReport& r) -> const Rates& {
    return agg == Aggregation::micro ? r.micro : r.macro;
  };
  OperatingPoint best;
  double best_gap = std::numeric_limits<double>::infinity();
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const Rates& r = pick(curve.points[i]);
    lo = std::min(lo, r.rf);
    hi = std::max(hi, r.rf);
    const double gap = std::abs(r.rf - target_rf);
    if (gap < best_gap || (gap == best_gap && r.rt > best.rt)) {
      best_gap = gap;
      best = {i, curve.points[i].threshold, r.rt, r.rf, r.f, false};
    }
  }
  best.clamped = target_rf < lo || target_rf > hi;
  return best;
}

}  // namespace ddpore::evalkit
