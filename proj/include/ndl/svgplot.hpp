#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ndl/eval.hpp"

namespace ndl {

// Deterministic standalone SVG line charts (no timestamps, fixed float
// formatting, fixed palette): identical inputs yield identical bytes.

// Two panels: validation DSC and validation sensitivity over epochs, one
// series per named log. Rows with NaN validation metrics are skipped.
std::string render_learning_svg(
    const std::vector<std::pair<std::string, MetricsLog>>& series);

// Sensitivity vs FP/scan on a log2 x axis with ticks at the 7 standard
// rates; each legend entry is annotated with the series' mean sensitivity
// at those rates.
std::string render_froc_svg(
    const std::vector<std::pair<std::string, FrocCurve>>& series);

}  // namespace ndl
