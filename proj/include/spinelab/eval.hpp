#ifndef SPINELAB_EVAL_HPP_
#define SPINELAB_EVAL_HPP_

#include <optional>
#include <string>
#include <vector>

#include "spinelab/infer.hpp"
#include "spinelab/preprocess.hpp"
#include "spinelab/volume.hpp"

namespace spinelab::eval {

/// Identification criterion: a ground-truth vertebra counts as a hit when a
/// same-label prediction lies within kHitDistanceMm of it AND that
/// ground-truth centroid is the nearest ground-truth centroid (any label) to
/// the prediction. Anyone comparing against other re-implementations must
/// confirm they use the same criterion.
constexpr double kHitDistanceMm = 20.0;

struct MatchRecord {
  std::string scan_id;
  int label = 0;
  std::array<double, 3> gt_mm{};
  std::optional<std::array<double, 3>> pred_mm;
  std::optional<double> distance_mm;
  bool hit = false;
};

struct ScanCounts {
  std::string scan_id;
  int64_t hits = 0;
  int64_t predicted = 0;
  int64_t actual = 0;
};

/// One record per ground-truth vertebra.
std::vector<MatchRecord> match_and_score(const CentroidSet& pred,
                                         const CentroidSet& gt,
                                         const std::string& scan_id = "");

ScanCounts count_scan(const std::vector<MatchRecord>& records,
                      const CentroidSet& pred, const std::string& scan_id);

/// Pooled over all records: 100 * hits / total ground-truth vertebrae.
double id_rate(const std::vector<MatchRecord>& records);

struct DistanceStats {
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation
  int64_t count = 0;
};

/// Distances over all same-label (gt, prediction) pairs pooled over the
/// set; hits_only restricts to identified vertebrae.
std::optional<DistanceStats> localisation_distances(
    const std::vector<MatchRecord>& records, bool hits_only = false);

struct PrAggregate {
  double precision = 0.0;  // percent, averaged per scan
  double recall = 0.0;     // percent, averaged per scan
  std::vector<double> per_scan_precision;
  std::vector<double> per_scan_recall;  // parallel to scans with gt > 0
};

/// Per-scan precision (hits/predicted, 1 when nothing predicted and nothing
/// hit) and recall (hits/actual), averaged over scans. Scans without
/// ground truth are excluded from the recall average with a warning.
PrAggregate precision_recall(const std::vector<ScanCounts>& scans);

/// Harmonic mean; 0 when both arguments are 0.
double f1(double precision, double recall);

struct ScanPrediction {
  std::string scan_id;
  prep::HeatmapStack sag;  // raw prediction stacks, pre-threshold
  prep::HeatmapStack cor;
  CentroidSet gt;
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int64_t total_predicted = 0;
};

/// Fig.-5-style sweep: for every T in the grid, threshold both views, fuse,
/// extract, score. The curve is empirical; no monotonicity is assumed.
std::vector<PrPoint> pr_sweep(const std::vector<ScanPrediction>& scans,
                              const std::vector<double>& grid);

/// T = 0, 0.05, ..., 0.8 (17 points).
std::vector<double> default_threshold_grid();

struct PerLabelRow {
  int label = 0;
  int64_t gt_count = 0;
  int64_t pred_count = 0;
  int64_t hits = 0;
  std::optional<double> mean_distance_mm;
};

struct PerScanRow {
  std::string scan_id;
  int64_t hits = 0, predicted = 0, actual = 0;
  double precision = 0.0, recall = 0.0;  // percent
};

struct EvalReport {
  double id_rate = 0.0;
  std::optional<DistanceStats> distances;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  double threshold = 0.0;
  int64_t total_gt = 0, total_predicted = 0, total_hits = 0;
  std::vector<PerScanRow> per_scan;
  std::vector<PerLabelRow> per_label;
};

struct ScoredScan {
  std::string scan_id;
  CentroidSet pred;
  CentroidSet gt;
};

EvalReport evaluate(const std::vector<ScoredScan>& scans, double threshold,
                    bool distances_hits_only = false);

/// summary.csv, per_scan.csv, per_label.csv and summary.txt under out_dir.
void write_report(const std::string& out_dir, const EvalReport& report);
void write_pr_curve_csv(const std::string& path,
                        const std::vector<PrPoint>& curve);
/// Minimal self-contained SVG rendering of the PR curve.
void write_pr_curve_svg(const std::string& path,
                        const std::vector<PrPoint>& curve);

}  // namespace spinelab::eval

#endif  // SPINELAB_EVAL_HPP_
