#pragma once

// Static SVG charts and summary tables built from run artifacts
// (metrics.jsonl, eval_report.jsonl, ablation.csv).

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mnarrl::report {

class EmptyInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Axis {
  double lo = 0.0;
  double hi = 1.0;
  double step = 0.1;
};

// Rounded axis range with about `ticks` intervals; always covers [lo, hi].
Axis nice_axis(double lo, double hi, int ticks = 5);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Bar {
  std::string label;
  double value = 0.0;
  std::optional<double> lower;
  std::optional<double> upper;
};

std::string line_chart_svg(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series);
std::string bar_chart_svg(const std::string& title, const std::string& y_label,
                          const std::vector<Bar>& bars);

// Scans the inputs (files or directories, recursively) for artifacts and
// writes entropy.svg, kl_per_dim.svg, fqe_comparison.svg and summary.md for
// whatever is present. Throws EmptyInput when nothing usable is found.
std::vector<std::filesystem::path> build_report(const std::vector<std::filesystem::path>& inputs,
                                                const std::filesystem::path& out_dir);

}  // namespace mnarrl::report
