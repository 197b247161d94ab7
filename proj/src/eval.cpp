#include "spinelab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "spinelab/error.hpp"

namespace spinelab::eval {

namespace fs = std::filesystem;

namespace {

double dist3(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  const double dz = a[0] - b[0], dx = a[1] - b[1], dy = a[2] - b[2];
  return std::sqrt(dz * dz + dx * dx + dy * dy);
}

}  // namespace

std::vector<MatchRecord> match_and_score(const CentroidSet& pred,
                                         const CentroidSet& gt,
                                         const std::string& scan_id) {
  std::vector<MatchRecord> out;
  for (const auto& [label, gt_c] : gt.entries()) {
    MatchRecord rec;
    rec.scan_id = scan_id;
    rec.label = label;
    rec.gt_mm = gt_c.pos_mm;
    const VertebraLabel vl = VertebraLabel::from_index(label);
    if (pred.has(vl)) {
      const auto& p = pred.get(vl);
      rec.pred_mm = p.pos_mm;
      const double d = dist3(p.pos_mm, gt_c.pos_mm);
      rec.distance_mm = d;
      // Nearest ground-truth condition: no other gt centroid may be closer
      // to this prediction than the same-label one.
      bool nearest = true;
      for (const auto& [other_label, other_c] : gt.entries()) {
        if (other_label == label) continue;
        if (dist3(p.pos_mm, other_c.pos_mm) < d) {
          nearest = false;
          break;
        }
      }
      rec.hit = (d <= kHitDistanceMm) && nearest;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

ScanCounts count_scan(const std::vector<MatchRecord>& records,
                      const CentroidSet& pred, const std::string& scan_id) {
  ScanCounts c;
  c.scan_id = scan_id;
  c.predicted = static_cast<int64_t>(pred.size());
  c.actual = static_cast<int64_t>(records.size());
  for (const auto& r : records) {
    if (r.hit) ++c.hits;
  }
  return c;
}

double id_rate(const std::vector<MatchRecord>& records) {
  if (records.empty())
    throw ConfigError("id_rate undefined without ground-truth vertebrae");
  int64_t hits = 0;
  for (const auto& r : records) {
    if (r.hit) ++hits;
  }
  return 100.0 * static_cast<double>(hits) /
         static_cast<double>(records.size());
}

std::optional<DistanceStats> localisation_distances(
    const std::vector<MatchRecord>& records, bool hits_only) {
  std::vector<double> d;
  for (const auto& r : records) {
    if (!r.distance_mm) continue;
    if (hits_only && !r.hit) continue;
    d.push_back(*r.distance_mm);
  }
  if (d.empty()) return std::nullopt;
  double sum = 0.0;
  for (double v : d) sum += v;
  const double mean = sum / static_cast<double>(d.size());
  double ss = 0.0;
  for (double v : d) ss += (v - mean) * (v - mean);
  DistanceStats stats;
  stats.mean = mean;
  stats.stddev = std::sqrt(ss / static_cast<double>(d.size()));
  stats.count = static_cast<int64_t>(d.size());
  return stats;
}

PrAggregate precision_recall(const std::vector<ScanCounts>& scans) {
  if (scans.empty()) throw ConfigError("precision_recall needs scans");
  PrAggregate agg;
  double p_sum = 0.0, r_sum = 0.0;
  int64_t r_scans = 0;
  for (const auto& s : scans) {
    const double p =
        s.predicted > 0
            ? static_cast<double>(s.hits) / static_cast<double>(s.predicted)
            : 1.0;  // nothing predicted, nothing wrong
    agg.per_scan_precision.push_back(100.0 * p);
    p_sum += p;
    if (s.actual > 0) {
      const double r =
          static_cast<double>(s.hits) / static_cast<double>(s.actual);
      agg.per_scan_recall.push_back(100.0 * r);
      r_sum += r;
      ++r_scans;
    } else {
      std::cerr << "warning: scan '" << s.scan_id
                << "' has no ground-truth vertebrae; excluded from recall\n";
    }
  }
  agg.precision = 100.0 * p_sum / static_cast<double>(scans.size());
  agg.recall = r_scans > 0 ? 100.0 * r_sum / static_cast<double>(r_scans) : 0.0;
  return agg;
}

double f1(double precision, double recall) {
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<double> default_threshold_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 16; ++i) grid.push_back(0.05 * static_cast<double>(i));
  return grid;
}

std::vector<PrPoint> pr_sweep(const std::vector<ScanPrediction>& scans,
                              const std::vector<double>& grid) {
  if (grid.empty()) throw ConfigError("pr_sweep needs a threshold grid");
  std::vector<PrPoint> curve;
  for (double t : grid) {
    std::vector<ScanCounts> counts;
    std::vector<MatchRecord> all_records;
    int64_t total_pred = 0;
    for (const auto& scan : scans) {
      const CentroidSet pred = infer::extract_centroids_from_views(
          scan.sag, scan.cor, t, t * t);
      auto records = match_and_score(pred, scan.gt, scan.scan_id);
      counts.push_back(count_scan(records, pred, scan.scan_id));
      total_pred += static_cast<int64_t>(pred.size());
      for (auto& r : records) all_records.push_back(std::move(r));
    }
    const PrAggregate agg = precision_recall(counts);
    PrPoint pt;
    pt.threshold = t;
    pt.precision = agg.precision;
    pt.recall = agg.recall;
    pt.f1 = f1(agg.precision, agg.recall);
    pt.total_predicted = total_pred;
    curve.push_back(pt);
  }
  return curve;
}

EvalReport evaluate(const std::vector<ScoredScan>& scans, double threshold,
                    bool distances_hits_only) {
  EvalReport report;
  report.threshold = threshold;

  std::vector<MatchRecord> all_records;
  std::vector<ScanCounts> counts;
  std::map<int, PerLabelRow> per_label;
  std::map<int, std::vector<double>> label_distances;

  for (const auto& s : scans) {
    auto records = match_and_score(s.pred, s.gt, s.scan_id);
    const ScanCounts c = count_scan(records, s.pred, s.scan_id);
    counts.push_back(c);
    report.total_predicted += c.predicted;
    for (const auto& [label, cent] : s.pred.entries()) {
      (void)cent;
      per_label[label].pred_count += 1;
    }
    for (const auto& r : records) {
      PerLabelRow& row = per_label[r.label];
      row.label = r.label;
      row.gt_count += 1;
      if (r.hit) row.hits += 1;
      if (r.distance_mm) label_distances[r.label].push_back(*r.distance_mm);
      all_records.push_back(r);
    }
  }

  report.total_gt = static_cast<int64_t>(all_records.size());
  for (const auto& r : all_records) {
    if (r.hit) ++report.total_hits;
  }
  report.id_rate = id_rate(all_records);
  report.distances = localisation_distances(all_records, distances_hits_only);
  const PrAggregate agg = precision_recall(counts);
  report.precision = agg.precision;
  report.recall = agg.recall;
  report.f1 = f1(agg.precision, agg.recall);

  for (const auto& c : counts) {
    PerScanRow row;
    row.scan_id = c.scan_id;
    row.hits = c.hits;
    row.predicted = c.predicted;
    row.actual = c.actual;
    row.precision = c.predicted > 0 ? 100.0 * static_cast<double>(c.hits) /
                                          static_cast<double>(c.predicted)
                                    : 100.0;
    row.recall = c.actual > 0 ? 100.0 * static_cast<double>(c.hits) /
                                    static_cast<double>(c.actual)
                              : 0.0;
    report.per_scan.push_back(row);
  }
  for (auto& [label, row] : per_label) {
    row.label = label;
    const auto& d = label_distances[label];
    if (!d.empty()) {
      double sum = 0.0;
      for (double v : d) sum += v;
      row.mean_distance_mm = sum / static_cast<double>(d.size());
    }
    report.per_label.push_back(row);
  }
  return report;
}

void write_report(const std::string& out_dir, const EvalReport& report) {
  fs::create_directories(out_dir);
  {
    std::ofstream os(fs::path(out_dir) / "summary.csv");
    if (!os) throw Error("cannot write summary.csv in " + out_dir);
    os << "id_rate,d_mean,d_std,matched_pairs,precision,recall,f1,threshold,"
          "scans,gt,predicted,hits\n";
    os.precision(10);
    os << report.id_rate << ",";
    if (report.distances)
      os << report.distances->mean << "," << report.distances->stddev << ","
         << report.distances->count << ",";
    else
      os << ",,0,";
    os << report.precision << "," << report.recall << "," << report.f1 << ","
       << report.threshold << "," << report.per_scan.size() << ","
       << report.total_gt << "," << report.total_predicted << ","
       << report.total_hits << "\n";
  }
  {
    std::ofstream os(fs::path(out_dir) / "per_scan.csv");
    os << "scan,hits,predicted,actual,precision,recall\n";
    os.precision(10);
    for (const auto& r : report.per_scan)
      os << r.scan_id << "," << r.hits << "," << r.predicted << ","
         << r.actual << "," << r.precision << "," << r.recall << "\n";
  }
  {
    std::ofstream os(fs::path(out_dir) / "per_label.csv");
    os << "label,gt_count,pred_count,hits,mean_distance_mm\n";
    os.precision(10);
    for (const auto& r : report.per_label) {
      os << VertebraLabel::from_index(r.label).name() << "," << r.gt_count
         << "," << r.pred_count << "," << r.hits << ",";
      if (r.mean_distance_mm) os << *r.mean_distance_mm;
      os << "\n";
    }
  }
  {
    std::ofstream os(fs::path(out_dir) / "summary.txt");
    os.precision(4);
    os << std::fixed;
    os << "scans:        " << report.per_scan.size() << "\n";
    os << "threshold:    " << report.threshold << "\n";
    os << "id rate:      " << report.id_rate << " %\n";
    if (report.distances) {
      os << "d_mean:       " << report.distances->mean << " mm\n";
      os << "d_std:        " << report.distances->stddev << " mm\n";
    } else {
      os << "d_mean/d_std: no matched pairs\n";
    }
    os << "precision:    " << report.precision << " %\n";
    os << "recall:       " << report.recall << " %\n";
    os << "F1:           " << report.f1 << " %\n";
    os << "vertebrae:    " << report.total_gt << " gt, "
       << report.total_predicted << " predicted, " << report.total_hits
       << " hits\n";
  }
}

void write_pr_curve_csv(const std::string& path,
                        const std::vector<PrPoint>& curve) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "threshold,precision,recall,f1,predicted\n";
  os.precision(10);
  for (const auto& p : curve)
    os << p.threshold << "," << p.precision << "," << p.recall << "," << p.f1
       << "," << p.total_predicted << "\n";
}

void write_pr_curve_svg(const std::string& path,
                        const std::vector<PrPoint>& curve) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  const double w = 480, h = 480, margin = 50;
  auto px = [&](double recall) {
    return margin + (w - 2 * margin) * recall / 100.0;
  };
  auto py = [&](double precision) {
    return h - margin - (h - 2 * margin) * precision / 100.0;
  };
  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='"
     << h << "'>\n";
  os << "<rect width='100%' height='100%' fill='white'/>\n";
  os << "<line x1='" << margin << "' y1='" << h - margin << "' x2='"
     << w - margin << "' y2='" << h - margin << "' stroke='black'/>\n";
  os << "<line x1='" << margin << "' y1='" << margin << "' x2='" << margin
     << "' y2='" << h - margin << "' stroke='black'/>\n";
  os << "<text x='" << w / 2 << "' y='" << h - 12
     << "' text-anchor='middle' font-size='13'>recall (%)</text>\n";
  os << "<text x='14' y='" << h / 2
     << "' text-anchor='middle' font-size='13' transform='rotate(-90 14 "
     << h / 2 << ")'>precision (%)</text>\n";
  os << "<polyline fill='none' stroke='steelblue' stroke-width='1.5' points='";
  for (const auto& p : curve) os << px(p.recall) << "," << py(p.precision) << " ";
  os << "'/>\n";
  for (const auto& p : curve) {
    os << "<circle cx='" << px(p.recall) << "' cy='" << py(p.precision)
       << "' r='2.5' fill='steelblue'/>\n";
  }
  os << "</svg>\n";
}

}  // namespace spinelab::eval
