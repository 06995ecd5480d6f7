#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gsmp/io.hpp"

namespace gsmp::plot {

// Hand-rolled self-contained SVG line plots for the emitted CSV tables.
// kinds:
//   convexity - lambda,F,dplus,dminus: F with its one-sided tangents at 0
//   descent   - iter,J,step,residual:  J per iteration
//   gamma     - epsilon,gamma:         gamma against epsilon, log10 x-axis

namespace detail {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 20, kTop = 30, kBottom = 50;

struct Series {
  std::vector<double> x, y;
};

inline std::string axis_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return std::string(buf);
}

inline std::string render(const Series& data, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<std::pair<Series, std::string>>& overlays = {}) {
  double x_lo = data.x.front(), x_hi = data.x.front();
  double y_lo = data.y.front(), y_hi = data.y.front();
  const auto stretch = [&](const Series& s) {
    for (double v : s.x) {
      x_lo = std::min(x_lo, v);
      x_hi = std::max(x_hi, v);
    }
    for (double v : s.y) {
      y_lo = std::min(y_lo, v);
      y_hi = std::max(y_hi, v);
    }
  };
  stretch(data);
  for (const auto& [series, label] : overlays) stretch(series);
  if (x_hi == x_lo) x_hi = x_lo + 1;
  if (y_hi == y_lo) y_hi = y_lo + 1;
  const double x_pad = 0.03 * (x_hi - x_lo), y_pad = 0.08 * (y_hi - y_lo);
  x_lo -= x_pad;
  x_hi += x_pad;
  y_lo -= y_pad;
  y_hi += y_pad;

  const auto px = [&](double x) {
    return kLeft + (x - x_lo) / (x_hi - x_lo) * (kWidth - kLeft - kRight);
  };
  const auto py = [&](double y) {
    return kHeight - kBottom - (y - y_lo) / (y_hi - y_lo) * (kHeight - kTop - kBottom);
  };
  const auto polyline = [&](const Series& s, const std::string& color) {
    std::ostringstream os;
    os << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (i) os << ' ';
      os << px(s.x[i]) << ',' << py(s.y[i]);
    }
    os << "\"/>\n";
    return os.str();
  };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
      << kHeight << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
      << "  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "  <text x=\"" << kWidth / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
      << title << "</text>\n";
  // axes
  svg << "  <line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\""
      << kWidth - kRight << "\" y2=\"" << kHeight - kBottom
      << "\" stroke=\"black\" stroke-width=\"1\"/>\n"
      << "  <line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
      << kHeight - kBottom << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x_lo + (x_hi - x_lo) * i / 4;
    const double yv = y_lo + (y_hi - y_lo) * i / 4;
    svg << "  <text x=\"" << px(xv) << "\" y=\"" << kHeight - kBottom + 18
        << "\" text-anchor=\"middle\" font-size=\"11\">" << axis_label(xv) << "</text>\n"
        << "  <text x=\"" << kLeft - 8 << "\" y=\"" << py(yv) + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << axis_label(yv) << "</text>\n";
  }
  svg << "  <text x=\"" << kWidth / 2 << "\" y=\"" << kHeight - 12
      << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label << "</text>\n"
      << "  <text x=\"16\" y=\"" << kHeight / 2
      << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
      << kHeight / 2 << ")\">" << y_label << "</text>\n";
  svg << polyline(data, "#1f77b4");
  const char* palette[] = {"#d62728", "#2ca02c", "#9467bd"};
  int color = 0;
  double legend_y = kTop + 14;
  for (const auto& [series, label] : overlays) {
    svg << polyline(series, palette[color % 3]);
    svg << "  <text x=\"" << kWidth - kRight - 8 << "\" y=\"" << legend_y
        << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << palette[color % 3] << "\">"
        << label << "</text>\n";
    legend_y += 14;
    ++color;
  }
  svg << "</svg>\n";
  return svg.str();
}

inline std::size_t column_of(const io::CsvTable& table, const std::string& name) {
  for (std::size_t i = 0; i < table.header.size(); ++i)
    if (table.header[i] == name) return i;
  throw std::invalid_argument("plot: csv lacks required column '" + name + "'");
}

inline Series series_of(const io::CsvTable& table, const std::string& x, const std::string& y) {
  const std::size_t xi = column_of(table, x), yi = column_of(table, y);
  Series s;
  for (const auto& row : table.rows) {
    s.x.push_back(std::stod(row[xi]));
    s.y.push_back(std::stod(row[yi]));
  }
  // canonical row order may not be numeric order; sort by x for drawing
  std::vector<std::size_t> idx(s.x.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
  Series out;
  for (std::size_t i : idx) {
    out.x.push_back(s.x[i]);
    out.y.push_back(s.y[i]);
  }
  return out;
}

}  // namespace detail

/// Renders one of the documented CSV schemas to a self-contained SVG string.
/// Throws on schema mismatch or an empty table; nothing is written here.
inline std::string emit_plot(const io::CsvTable& table, const std::string& kind) {
  if (table.rows.empty()) throw std::invalid_argument("plot: csv has no data rows");
  if (kind == "convexity") {
    const auto f = detail::series_of(table, "lambda", "F");
    const double dplus = std::stod(table.rows.front()[detail::column_of(table, "dplus")]);
    const double dminus = std::stod(table.rows.front()[detail::column_of(table, "dminus")]);
    // one-sided tangents through (0, F(0))
    double f0 = f.y.front();
    for (std::size_t i = 0; i < f.x.size(); ++i)
      if (std::abs(f.x[i]) < 1e-15) f0 = f.y[i];
    detail::Series right{{0.0, f.x.back()}, {f0, f0 + dplus * f.x.back()}};
    detail::Series left{{f.x.front(), 0.0}, {f0 + dminus * f.x.front(), f0}};
    return detail::render(f, "perturbed worst-case value", "lambda", "F(lambda)",
                          {{right, "right slope " + detail::axis_label(dplus)},
                           {left, "left slope " + detail::axis_label(dminus)}});
  }
  if (kind == "descent") {
    const auto j = detail::series_of(table, "iter", "J");
    return detail::render(j, "descent trace", "iteration", "J");
  }
  if (kind == "gamma") {
    auto g = detail::series_of(table, "epsilon", "gamma");
    for (double& x : g.x) x = std::log10(x);
    return detail::render(g, "argmax-set distance under perturbation", "log10(epsilon)",
                          "gamma");
  }
  throw std::invalid_argument("plot: unknown kind '" + kind + "'");
}

}  // namespace gsmp::plot
