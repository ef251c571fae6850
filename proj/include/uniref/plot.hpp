#pragma once

#include <string>
#include <vector>

namespace uniref {

/// One polyline of (x, y) points.
struct Series {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

struct Marker {
  double x = 0.0;
  std::string label;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::vector<Marker> markers;
};

/// Deterministic SVG rendering.
std::string render_svg(const Chart& chart);

/// Build charts from metrics JSON-lines files (SFT and/or RL records) and write them as SVG into
/// `out_dir`. Returns the written paths; empty input yields no charts and a warning on stderr.
std::vector<std::string> plot_metrics(const std::vector<std::string>& metrics_files, const std::string& out_dir);

}  // namespace uniref
