#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ndl/data.hpp"
#include "ndl/model.hpp"

namespace ndl {

// 2|A n B| / (|A|+|B|); the both-empty case reads as perfect agreement (1.0).
double dice(const Mask& a, const Mask& b);

// TP/(TP+FN), prediction positive iff score >= threshold. Requires at least
// one positive label.
double sensitivity(const std::vector<double>& scores,
                   const std::vector<int>& labels, double threshold);

// Candidate-level FROC: every distinct score is a decision threshold; each
// point records (false positives per scan, sensitivity) at that threshold.
struct FrocCurve {
  struct Point {
    double threshold;
    double fp_per_scan;
    double sensitivity;
  };
  std::vector<Point> points;  // thresholds descending, fp_per_scan ascending
  int n_scans = 0;
};

inline const std::vector<double> kFrocRates = {0.125, 0.25, 0.5, 1, 2, 4, 8};

FrocCurve froc(const std::vector<double>& scores, const std::vector<int>& labels,
               const std::vector<std::string>& scan_ids);

// Step read-off: largest achieved sensitivity with fp_per_scan <= rate
// (0 when no threshold stays within the budget).
double froc_read_off(const FrocCurve& curve, double rate);

// Mean sensitivity at the 7 standard FP/scan rates.
double froc_score(const FrocCurve& curve,
                  const std::vector<double>& rates = kFrocRates);

// ---------------------------------------------------------------------------
// Aggregated fold evaluation
// ---------------------------------------------------------------------------

struct FoldMetrics {
  double mean_dsc = 0.0;   // over true-nodule records only
  double sens = 0.0;       // at classification threshold 0.5
  double froc_avg = 0.0;
  FrocCurve curve;
  int n_records = 0;
  int n_nodules = 0;
};

using Predictor = std::function<Prediction(const Volume&)>;

// Requires ground-truth labels on every record (no 'unlabeled').
FoldMetrics evaluate_fold(const Predictor& predict,
                          const std::vector<const CandidateRecord*>& records,
                          double seg_threshold);

// Batched variant; per-sample outputs are identical to the per-record path.
FoldMetrics evaluate_fold(const MultiTaskNet& net,
                          const std::vector<const CandidateRecord*>& records,
                          double seg_threshold, int batch_size = 8);

// ---------------------------------------------------------------------------
// Logs
// ---------------------------------------------------------------------------

struct MetricsLog {
  struct Row {
    int epoch = 0;
    int round = 0;
    double loss_total = 0.0;
    double loss_cls = 0.0;
    double loss_seg = 0.0;
    double val_dsc = 0.0;
    double val_sens = 0.0;
  };
  std::vector<Row> rows;

  // CSV: epoch,round,loss_total,loss_cls,loss_seg,val_dsc,val_sens.
  // Doubles round-trip exactly.
  void write_csv(const std::filesystem::path& path) const;
  static MetricsLog read_csv(const std::filesystem::path& path);
};

// CSV: threshold,fp_per_scan,sensitivity.
void write_froc_csv(const std::filesystem::path& path, const FrocCurve& curve);
FrocCurve read_froc_csv(const std::filesystem::path& path);

}  // namespace ndl
