#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ddpore/dataprep/pores.hpp"
#include "ddpore/detector/detector.hpp"
#include "json.hpp"

namespace ddpore::evalkit {

using dataprep::PoreList;

// Detection i is true iff its nearest ground-truth pore j has i as its own
// nearest detection. Distances are Euclidean; ties go to the lowest index.
struct MatchResult {
  std::vector<std::int64_t> nearest_gt;        // per detection; -1 when there is no GT
  std::vector<std::uint8_t> mutual;            // per detection
  std::vector<std::int64_t> true_detections;   // detection indices, ascending
  std::vector<std::int64_t> false_detections;  // detection indices, ascending
  std::vector<std::int64_t> hit_gt;            // GT indices, ascending
  std::vector<std::int64_t> missed_gt;         // GT indices, ascending
};

MatchResult match_pores(const PoreList& detected, const PoreList& gt);

struct Counts {
  std::int64_t detections = 0;
  std::int64_t ground_truth = 0;
  std::int64_t true_detections = 0;

  std::int64_t false_detections() const { return detections - true_detections; }
  Counts& operator+=(const Counts& o);
  bool operator==(const Counts&) const = default;
};

struct Rates {
  double rt = 0.0;  // true/GT; 0 without GT
  double rf = 0.0;  // false/detections; 0 without detections
  double precision = 0.0;  // 1 - rf
  double recall = 0.0;
  double f = 0.0;  // 2PR/(P+R); 0 when P+R = 0
};

Rates rates_from_counts(const Counts& c);

struct DetectionReport {
  double threshold = 0.0;
  std::int64_t images = 0;
  Counts counts;           // pooled
  Rates micro;             // from pooled counts
  Rates macro;             // per-image rates averaged
  std::vector<Counts> per_image;
};

DetectionReport compute_metrics(const MatchResult& match, std::int64_t total_gt,
                                double threshold = 0.0);
DetectionReport aggregate(std::span<const Counts> per_image, double threshold);

// Throws std::logic_error if rt != recall, rf != 1 - precision, a rate
// leaves [0, 1], or the micro F is not 2PR/(P+R). Every report built here
// passes through it.
void check_identities(const DetectionReport& report);

nlohmann::ordered_json to_json(const DetectionReport& report);

// ---------------------------------------------------------------------------
// ROC

std::vector<double> default_grid();  // 0.01, 0.02, ..., 0.99
// "start:stop:step", inclusive of stop up to rounding.
std::vector<double> parse_grid(const std::string& text);

struct RocCurve {
  std::vector<DetectionReport> points;  // strictly increasing threshold
};

// Local maxima are taken once per map; each threshold keeps those strictly
// above it.
RocCurve roc_from_maps(std::span<const detector::IntensityMap> maps, std::span<const PoreList> gt,
                       std::span<const double> grid);

RocCurve roc_sweep(porenet::PoreModel<float>& model, std::span<const dataprep::Image8> images,
                   std::span<const PoreList> gt, std::span<const double> grid);

inline constexpr std::string_view kRocHeader = "th,RT_micro,RF_micro,F_micro,RT_macro,RF_macro,F_macro";

std::string roc_csv(const RocCurve& curve);

enum class Aggregation { micro, macro };

struct OperatingPoint {
  std::size_t index = 0;
  double threshold = 0.0;
  double rt = 0.0;
  double rf = 0.0;
  double f = 0.0;
  // Target outside the curve's R_F range; the nearest endpoint was used.
  bool clamped = false;
};

// Point with R_F nearest to target_rf; ties prefer higher R_T, then the
// lower threshold.
OperatingPoint operating_point(const RocCurve& curve, double target_rf,
                               Aggregation agg = Aggregation::micro);

}  // namespace ddpore::evalkit
