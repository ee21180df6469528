#include "ndl/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace ndl {

namespace {

constexpr int kPanelW = 560;
constexpr int kPanelH = 420;
constexpr int kMarginL = 64;
constexpr int kMarginR = 16;
constexpr int kMarginT = 40;
constexpr int kMarginB = 48;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c",
                          "#9467bd", "#ff7f0e", "#8c564b"};
constexpr int kPaletteSize = 6;

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

struct Axis {
  double lo, hi;                 // data range
  double px0, px1;               // pixel range
  bool log2 = false;
  double map(double v) const {
    const double t = log2 ? std::log2(v) : v;
    const double a = log2 ? std::log2(lo) : lo;
    const double b = log2 ? std::log2(hi) : hi;
    return px0 + (t - a) / (b - a) * (px1 - px0);
  }
};

void panel_frame(std::ostringstream& os, int x0, const std::string& title,
                 const std::string& xlabel, const std::string& ylabel) {
  os << "<rect x=\"" << x0 + kMarginL << "\" y=\"" << kMarginT << "\" width=\""
     << kPanelW - kMarginL - kMarginR << "\" height=\""
     << kPanelH - kMarginT - kMarginB
     << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
  os << "<text x=\"" << x0 + kPanelW / 2 << "\" y=\"22\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
  os << "<text x=\"" << x0 + kPanelW / 2 << "\" y=\"" << kPanelH - 12
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
     << xlabel << "</text>\n";
  os << "<text x=\"" << x0 + 16 << "\" y=\"" << kPanelH / 2
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
     << "transform=\"rotate(-90 " << x0 + 16 << " " << kPanelH / 2 << ")\">"
     << ylabel << "</text>\n";
}

void y_ticks_unit(std::ostringstream& os, int x0, const Axis& ya) {
  for (int i = 0; i <= 4; ++i) {
    const double v = 0.25 * i;
    const double py = ya.map(v);
    os << "<line x1=\"" << x0 + kMarginL - 4 << "\" y1=\"" << num(py)
       << "\" x2=\"" << x0 + kMarginL << "\" y2=\"" << num(py)
       << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << x0 + kMarginL - 8 << "\" y=\"" << num(py + 4)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
       << num(v) << "</text>\n";
  }
}

void polyline(std::ostringstream& os, const std::vector<double>& xs,
              const std::vector<double>& ys, const Axis& xa, const Axis& ya,
              const char* color) {
  os << "<polyline fill=\"none\" stroke=\"" << color
     << "\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ' ';
    os << num(xa.map(xs[i])) << ',' << num(ya.map(ys[i]));
  }
  os << "\"/>\n";
  for (std::size_t i = 0; i < xs.size(); ++i)
    os << "<circle cx=\"" << num(xa.map(xs[i])) << "\" cy=\""
       << num(ya.map(ys[i])) << "\" r=\"2.2\" fill=\"" << color << "\"/>\n";
}

void legend(std::ostringstream& os, int x0,
            const std::vector<std::string>& labels) {
  const int lx = x0 + kMarginL + 10;
  int ly = kMarginT + 16;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const char* color = kPalette[i % kPaletteSize];
    os << "<line x1=\"" << lx << "\" y1=\"" << ly - 4 << "\" x2=\"" << lx + 22
       << "\" y2=\"" << ly - 4 << "\" stroke=\"" << color
       << "\" stroke-width=\"2\"/>\n";
    os << "<text x=\"" << lx + 28 << "\" y=\"" << ly
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << labels[i]
       << "</text>\n";
    ly += 16;
  }
}

}  // namespace

std::string render_learning_svg(
    const std::vector<std::pair<std::string, MetricsLog>>& series) {
  if (series.empty()) throw DataError("plot: no learning-curve series");
  int max_epoch = 1;
  for (const auto& [name, log] : series) {
    if (log.rows.empty())
      throw DataError("plot: learning-curve series '" + name + "' is empty");
    for (const auto& r : log.rows) max_epoch = std::max(max_epoch, r.epoch);
  }

  std::ostringstream os;
  const int width = 2 * kPanelW;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << kPanelH << "\" viewBox=\"0 0 " << width << " "
     << kPanelH << "\">\n";
  os << "<rect width=\"" << width << "\" height=\"" << kPanelH
     << "\" fill=\"white\"/>\n";

  struct Panel {
    int x0;
    const char* title;
    double MetricsLog::Row::*field;
  };
  const Panel panels[2] = {
      {0, "Validation DSC", &MetricsLog::Row::val_dsc},
      {kPanelW, "Validation sensitivity", &MetricsLog::Row::val_sens},
  };

  for (const auto& p : panels) {
    Axis xa{1.0, static_cast<double>(std::max(2, max_epoch)),
            static_cast<double>(p.x0 + kMarginL),
            static_cast<double>(p.x0 + kPanelW - kMarginR)};
    Axis ya{0.0, 1.0, static_cast<double>(kPanelH - kMarginB),
            static_cast<double>(kMarginT)};
    panel_frame(os, p.x0, p.title, "epoch", p.title);
    y_ticks_unit(os, p.x0, ya);
    for (int i = 0; i <= 4; ++i) {
      const double e = 1.0 + (xa.hi - 1.0) * i / 4.0;
      const double px = xa.map(e);
      os << "<line x1=\"" << num(px) << "\" y1=\"" << kPanelH - kMarginB
         << "\" x2=\"" << num(px) << "\" y2=\"" << kPanelH - kMarginB + 4
         << "\" stroke=\"#444\"/>\n";
      os << "<text x=\"" << num(px) << "\" y=\"" << kPanelH - kMarginB + 18
         << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
            "font-size=\"11\">"
         << num(std::round(e)) << "</text>\n";
    }
    std::vector<std::string> labels;
    for (std::size_t s = 0; s < series.size(); ++s) {
      std::vector<double> xs, ys;
      for (const auto& r : series[s].second.rows) {
        const double v = r.*(p.field);
        if (std::isnan(v)) continue;
        xs.push_back(static_cast<double>(r.epoch));
        ys.push_back(v);
      }
      if (!xs.empty())
        polyline(os, xs, ys, xa, ya, kPalette[s % kPaletteSize]);
      labels.push_back(series[s].first);
    }
    legend(os, p.x0, labels);
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_froc_svg(
    const std::vector<std::pair<std::string, FrocCurve>>& series) {
  if (series.empty()) throw DataError("plot: no FROC series");
  for (const auto& [name, curve] : series)
    if (curve.points.empty())
      throw DataError("plot: FROC series '" + name + "' is empty");

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPanelW
     << "\" height=\"" << kPanelH << "\" viewBox=\"0 0 " << kPanelW << " "
     << kPanelH << "\">\n";
  os << "<rect width=\"" << kPanelW << "\" height=\"" << kPanelH
     << "\" fill=\"white\"/>\n";

  Axis xa{0.125, 8.0, static_cast<double>(kMarginL),
          static_cast<double>(kPanelW - kMarginR)};
  xa.log2 = true;
  Axis ya{0.0, 1.0, static_cast<double>(kPanelH - kMarginB),
          static_cast<double>(kMarginT)};
  panel_frame(os, 0, "FROC", "false positives per scan", "sensitivity");
  y_ticks_unit(os, 0, ya);
  for (double rate : kFrocRates) {
    const double px = xa.map(rate);
    os << "<line x1=\"" << num(px) << "\" y1=\"" << kPanelH - kMarginB
       << "\" x2=\"" << num(px) << "\" y2=\"" << kPanelH - kMarginB + 4
       << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << num(px) << "\" y=\"" << kPanelH - kMarginB + 18
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"11\">"
       << num(rate) << "</text>\n";
  }

  std::vector<std::string> labels;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& curve = series[s].second;
    std::vector<double> xs, ys;
    for (const auto& p : curve.points) {
      if (p.fp_per_scan < xa.lo || p.fp_per_scan > xa.hi) continue;
      xs.push_back(p.fp_per_scan);
      ys.push_back(p.sensitivity);
    }
    if (!xs.empty()) polyline(os, xs, ys, xa, ya, kPalette[s % kPaletteSize]);
    char score[64];
    std::snprintf(score, sizeof score, "%s (score %.3f)",
                  series[s].first.c_str(), froc_score(curve));
    labels.emplace_back(score);
  }
  legend(os, 0, labels);
  os << "</svg>\n";
  return os.str();
}

}  // namespace ndl
