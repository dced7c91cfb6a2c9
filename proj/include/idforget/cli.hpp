#pragma once

#include <ostream>
#include <string>
#include <utility>
#include <vector>

namespace idf {

// Stable process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitArtifact = 3;
inline constexpr int kExitUnknownId = 4;
inline constexpr int kExitNumerical = 5;

// Runs one command line (args[0] is the program name). Diagnostics go to
// `err`, progress lines to `out`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

struct PlotSeries {
  std::string name;
  std::vector<double> y;
};

// Line plot as SVG text: one polyline per series over shared x values.
// Identical inputs give identical bytes.
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::vector<double>& x,
                          const std::vector<PlotSeries>& series);

// Plot of id_forget and id_retain against the swept value, read from
// sweep.csv text. The sweep command writes sweep.svg through this function.
std::string sweep_plot_from_csv(const std::string& csv_text);

}  // namespace idf
