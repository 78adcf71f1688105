#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace tscil::eval {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> err;  // optional symmetric error bars
};

struct LineChart {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  double width = 640;
  double height = 400;
  bool log_x = false;
};

/// Renders a line chart with axes, ticks and a legend as standalone SVG.
std::string render_svg(const LineChart& chart);

struct SparkCell {
  std::string caption;
  std::vector<double> values;
};

/// Grid of small line plots, `columns` per row, each cell autoscaled.
std::string render_grid_svg(const std::string& title, const std::vector<SparkCell>& cells, std::size_t columns);

void write_svg(const std::filesystem::path& path, const std::string& svg);

}  // namespace tscil::eval
