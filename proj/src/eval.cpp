#include "ndl/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace ndl {

double dice(const Mask& a, const Mask& b) {
  if (a.shape != b.shape)
    throw ShapeError("dice: mask shapes differ");
  std::int64_t na = 0, nb = 0, inter = 0;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    const bool va = a.voxels[i] != 0, vb = b.voxels[i] != 0;
    na += va;
    nb += vb;
    inter += va && vb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double sensitivity(const std::vector<double>& scores,
                   const std::vector<int>& labels, double threshold) {
  if (scores.size() != labels.size())
    throw ShapeError("sensitivity: scores and labels differ in length");
  std::int64_t tp = 0, pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    ++pos;
    if (scores[i] >= threshold) ++tp;
  }
  if (pos == 0)
    throw DataError("sensitivity: undefined metric, no positive labels");
  return static_cast<double>(tp) / static_cast<double>(pos);
}

FrocCurve froc(const std::vector<double>& scores, const std::vector<int>& labels,
               const std::vector<std::string>& scan_ids) {
  if (scores.empty()) throw DataError("froc: empty input");
  if (scores.size() != labels.size() || scores.size() != scan_ids.size())
    throw ShapeError("froc: scores, labels and scan_ids differ in length");

  std::set<std::string> scans(scan_ids.begin(), scan_ids.end());
  const auto n_scans = static_cast<int>(scans.size());

  std::int64_t pos = 0;
  for (int l : labels) pos += (l == 1);
  if (pos == 0) throw DataError("froc: undefined metric, no positive labels");

  // Sweep the decision threshold over all distinct scores, descending.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });

  FrocCurve curve;
  curve.n_scans = n_scans;
  std::int64_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = scores[order[i]];
    while (i < order.size() && scores[order[i]] == t) {
      if (labels[order[i]] == 1)
        ++tp;
      else
        ++fp;
      ++i;
    }
    curve.points.push_back(
        {t, static_cast<double>(fp) / static_cast<double>(n_scans),
         static_cast<double>(tp) / static_cast<double>(pos)});
  }
  return curve;
}

double froc_read_off(const FrocCurve& curve, double rate) {
  double best = 0.0;
  for (const auto& p : curve.points)
    if (p.fp_per_scan <= rate) best = std::max(best, p.sensitivity);
  return best;
}

double froc_score(const FrocCurve& curve, const std::vector<double>& rates) {
  if (curve.points.empty()) throw DataError("froc_score: empty curve");
  if (rates.empty()) throw ConfigError("froc_score: no rates given");
  double acc = 0.0;
  for (double r : rates) acc += froc_read_off(curve, r);
  return acc / static_cast<double>(rates.size());
}

// ---------------------------------------------------------------------------
// Fold evaluation
// ---------------------------------------------------------------------------

namespace {

constexpr double kClsThreshold = 0.5;

FoldMetrics aggregate(const std::vector<const CandidateRecord*>& records,
                      const std::vector<double>& probs,
                      const std::vector<Mask>& masks) {
  FoldMetrics fm;
  fm.n_records = static_cast<int>(records.size());
  std::vector<int> labels(records.size());
  std::vector<std::string> scan_ids(records.size());
  double dsc_acc = 0.0;

  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = *records[i];
    if (r.label == ClassLabel::Unlabeled)
      throw DataError("evaluate_fold: record '" + r.id +
                      "' has no ground-truth label");
    labels[i] = r.label == ClassLabel::Nodule ? 1 : 0;
    scan_ids[i] = r.scan_id;
    if (r.label == ClassLabel::Nodule) {
      if (!r.mask)
        throw DataError("evaluate_fold: nodule record '" + r.id +
                        "' has no ground-truth mask");
      dsc_acc += dice(masks[i], *r.mask);
      ++fm.n_nodules;
    }
  }
  if (fm.n_nodules == 0)
    throw DataError("evaluate_fold: undefined metric, fold has no nodules");

  fm.mean_dsc = dsc_acc / fm.n_nodules;
  fm.sens = sensitivity(probs, labels, kClsThreshold);
  fm.curve = froc(probs, labels, scan_ids);
  fm.froc_avg = froc_score(fm.curve);
  return fm;
}

}  // namespace

FoldMetrics evaluate_fold(const Predictor& predict,
                          const std::vector<const CandidateRecord*>& records,
                          double seg_threshold) {
  (void)seg_threshold;
  if (records.empty()) throw DataError("evaluate_fold: empty fold");
  std::vector<double> probs(records.size());
  std::vector<Mask> masks(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    Prediction p = predict(records[i]->patch);
    probs[i] = p.nodule_prob;
    masks[i] = std::move(p.mask);
  }
  return aggregate(records, probs, masks);
}

FoldMetrics evaluate_fold(const MultiTaskNet& net,
                          const std::vector<const CandidateRecord*>& records,
                          double seg_threshold, int batch_size) {
  if (records.empty()) throw DataError("evaluate_fold: empty fold");
  if (batch_size < 1) throw ConfigError("evaluate_fold: batch_size must be >= 1");
  std::vector<double> probs(records.size());
  std::vector<Mask> masks(records.size());

  for (std::size_t start = 0; start < records.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(records.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const Volume*> patches;
    patches.reserve(end - start);
    for (std::size_t i = start; i < end; ++i)
      patches.push_back(&records[i]->patch);
    auto out = net.forward(batch_from_volumes(patches));
    const std::int64_t per = extent_count(records[start]->patch.shape);
    for (std::size_t i = start; i < end; ++i) {
      const auto b = static_cast<std::int64_t>(i - start);
      probs[i] = out.class_probs->values[static_cast<std::size_t>(2 * b + 1)];
      Mask m;
      m.shape = records[i]->patch.shape;
      m.voxels.resize(static_cast<std::size_t>(per));
      const double* seg = out.seg_probs->values.data() + b * per;
      for (std::int64_t j = 0; j < per; ++j)
        m.voxels[static_cast<std::size_t>(j)] = seg[j] >= seg_threshold ? 1 : 0;
      masks[i] = std::move(m);
    }
  }
  return aggregate(records, probs, masks);
}

// ---------------------------------------------------------------------------
// CSV logs
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kMetricsHeader =
    "epoch,round,loss_total,loss_cls,loss_seg,val_dsc,val_sens";
constexpr const char* kFrocHeader = "threshold,fp_per_scan,sensitivity";

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void MetricsLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write metrics log to " + path.string());
  os << kMetricsHeader << "\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.round << ',' << fmt_double(r.loss_total) << ','
       << fmt_double(r.loss_cls) << ',' << fmt_double(r.loss_seg) << ','
       << fmt_double(r.val_dsc) << ',' << fmt_double(r.val_sens) << "\n";
  if (!os) throw DataError("short write on " + path.string());
}

MetricsLog MetricsLog::read_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read metrics log from " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader)
    throw FormatError(path.string() + ": unexpected metrics header");
  MetricsLog log;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    if (cols.size() != 7)
      throw FormatError(path.string() + ": expected 7 columns");
    Row r;
    r.epoch = std::stoi(cols[0]);
    r.round = std::stoi(cols[1]);
    r.loss_total = std::stod(cols[2]);
    r.loss_cls = std::stod(cols[3]);
    r.loss_seg = std::stod(cols[4]);
    r.val_dsc = std::stod(cols[5]);
    r.val_sens = std::stod(cols[6]);
    log.rows.push_back(r);
  }
  return log;
}

void write_froc_csv(const std::filesystem::path& path, const FrocCurve& curve) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write FROC curve to " + path.string());
  os << kFrocHeader << "\n";
  for (const auto& p : curve.points)
    os << fmt_double(p.threshold) << ',' << fmt_double(p.fp_per_scan) << ','
       << fmt_double(p.sensitivity) << "\n";
  if (!os) throw DataError("short write on " + path.string());
}

FrocCurve read_froc_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read FROC curve from " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kFrocHeader)
    throw FormatError(path.string() + ": unexpected FROC header");
  FrocCurve curve;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cols = split_csv(line);
    if (cols.size() != 3)
      throw FormatError(path.string() + ": expected 3 columns");
    curve.points.push_back({std::stod(cols[0]), std::stod(cols[1]),
                            std::stod(cols[2])});
  }
  return curve;
}

}  // namespace ndl
