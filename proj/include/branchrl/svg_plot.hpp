#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "branchrl/csv.hpp"

namespace branchrl {

namespace detail {

inline double lerp_series(const std::vector<double>& xs, const std::vector<double>& ys,
                          double x) {
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::upper_bound(xs.begin(), xs.end(), x);
  const std::size_t hi = static_cast<std::size_t>(it - xs.begin());
  const std::size_t lo = hi - 1;
  const double t = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + t * (ys[hi] - ys[lo]);
}

}  // namespace detail

/// Renders the per-step mean of `column` across several metrics CSVs with a
/// +-1 population-standard-deviation band. Series on mismatched step grids
/// are resampled onto the coarsest grid; a warning is recorded when that
/// happens. Returns the path written.
inline std::filesystem::path emit_learning_curve(
    const std::vector<std::filesystem::path>& csv_paths, const std::string& column,
    const std::filesystem::path& out_svg, std::vector<std::string>* warnings = nullptr) {
  if (csv_paths.empty()) throw std::invalid_argument("plot: no input CSVs");
  std::vector<CsvTable> tables;
  for (const auto& p : csv_paths) tables.push_back(read_csv(p));
  for (std::size_t i = 1; i < tables.size(); ++i)
    if (tables[i].columns != tables[0].columns)
      throw std::invalid_argument("plot: CSVs do not share a column set");

  std::vector<std::vector<double>> xs(tables.size()), ys(tables.size());
  for (std::size_t i = 0; i < tables.size(); ++i) {
    xs[i] = tables[i].numeric_column("env_steps");
    ys[i] = tables[i].numeric_column(column);
    if (ys[i].empty())
      throw std::invalid_argument("plot: empty column '" + column + "' in " +
                                  csv_paths[i].string());
  }

  // coarsest grid = fewest rows
  std::size_t grid_idx = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i].size() < xs[grid_idx].size()) grid_idx = i;
  const std::vector<double>& grid = xs[grid_idx];
  bool resampled = false;
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (xs[i] != grid) resampled = true;
  if (resampled && warnings)
    warnings->push_back("plot: mismatched step grids resampled to the coarsest grid (" +
                        std::to_string(grid.size()) + " points)");

  std::vector<double> mean(grid.size(), 0.0), stddev(grid.size(), 0.0);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double m = 0.0;
    std::vector<double> vals;
    vals.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      vals.push_back(detail::lerp_series(xs[i], ys[i], grid[g]));
      m += vals.back();
    }
    m /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - m) * (v - m);
    var /= static_cast<double>(vals.size());  // population std across seeds
    mean[g] = m;
    stddev[g] = std::sqrt(var);
  }

  // plot geometry
  const double width = 860, height = 520;
  const double ml = 80, mr = 30, mt = 50, mb = 60;
  double x_lo = grid.front(), x_hi = grid.back();
  if (x_hi <= x_lo) x_hi = x_lo + 1.0;
  double y_lo = mean[0] - stddev[0], y_hi = mean[0] + stddev[0];
  for (std::size_t g = 0; g < grid.size(); ++g) {
    y_lo = std::min(y_lo, mean[g] - stddev[g]);
    y_hi = std::max(y_hi, mean[g] + stddev[g]);
  }
  if (y_hi <= y_lo) y_hi = y_lo + 1.0;
  const double pad = 0.05 * (y_hi - y_lo);
  y_lo -= pad;
  y_hi += pad;
  auto px = [&](double x) { return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr); };
  auto py = [&](double y) { return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb); };

  std::ofstream out(out_svg, std::ios::binary);
  if (!out) throw std::runtime_error("plot: cannot write " + out_svg.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">"
      << column << " — mean of " << csv_paths.size()
      << " runs, band = ±1 population std</text>\n";

  // axes and ticks
  out << "<line x1=\"" << ml << "\" y1=\"" << height - mb << "\" x2=\"" << width - mr
      << "\" y2=\"" << height - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
      << height - mb << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    const double xv = x_lo + (x_hi - x_lo) * i / 5.0;
    const double yv = y_lo + (y_hi - y_lo) * i / 5.0;
    out << "<text x=\"" << px(xv) << "\" y=\"" << height - mb + 20
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
        << format_double(xv) << "</text>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4
        << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">"
        << format_double(yv) << "</text>\n";
    out << "<line x1=\"" << px(xv) << "\" y1=\"" << height - mb << "\" x2=\"" << px(xv)
        << "\" y2=\"" << height - mb + 5 << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml - 5 << "\" y1=\"" << py(yv) << "\" x2=\"" << ml << "\" y2=\""
        << py(yv) << "\" stroke=\"black\"/>\n";
  }
  out << "<text x=\"" << (ml + width - mr) / 2 << "\" y=\"" << height - 15
      << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">env_steps"
      << "</text>\n";

  // band polygon: forward along +std, back along -std
  out << "<polygon fill=\"#4878cf\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
  for (std::size_t g = 0; g < grid.size(); ++g)
    out << px(grid[g]) << "," << py(mean[g] + stddev[g]) << " ";
  for (std::size_t g = grid.size(); g-- > 0;)
    out << px(grid[g]) << "," << py(mean[g] - stddev[g]) << " ";
  out << "\"/>\n";

  out << "<polyline fill=\"none\" stroke=\"#1f4e9c\" stroke-width=\"2\" points=\"";
  for (std::size_t g = 0; g < grid.size(); ++g) out << px(grid[g]) << "," << py(mean[g]) << " ";
  out << "\"/>\n";
  out << "</svg>\n";
  return out_svg;
}

}  // namespace branchrl
