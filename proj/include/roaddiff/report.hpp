#pragma once

// Plain-text result tables and SVG plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "roaddiff/graph.hpp"
#include "roaddiff/losses.hpp"
#include "roaddiff/tensor.hpp"

namespace roaddiff {

namespace detail {
inline std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}
inline std::string fmt_opt(const std::optional<double>& v, int prec = 2) { return v ? fmt(*v, prec) + "%" : "n/a"; }
inline std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}
inline std::string pad_right(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}
}  // namespace detail

struct ReportRow {
  std::string name;
  EvalReport report;
};

// Rows = methods; column groups = window sizes; each group MAE / RMSE / MAPE.
inline std::string results_table(const std::vector<ReportRow>& rows, const std::string& title) {
  std::vector<std::size_t> windows;
  for (const auto& r : rows)
    for (const auto& h : r.report.horizons)
      if (std::find(windows.begin(), windows.end(), h.window) == windows.end()) windows.push_back(h.window);
  std::sort(windows.begin(), windows.end());
  std::size_t name_w = 8;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size() + 2);
  const std::size_t col = 10;
  std::ostringstream out;
  out << title << "\n";
  std::string head1 = detail::pad_right("Method", name_w), head2 = std::string(name_w, ' ');
  for (std::size_t w : windows) {
    const std::string label = "T=" + std::to_string(w);
    const std::size_t span = 3 * col;
    const std::size_t left = (span - std::min(span, label.size())) / 2;
    head1 += std::string(left, ' ') + label + std::string(span - left - label.size(), ' ');
    head2 += detail::pad("MAE", col) + detail::pad("RMSE", col) + detail::pad("MAPE", col);
  }
  if (windows.empty()) head2 += detail::pad("MAE", col) + detail::pad("RMSE", col) + detail::pad("MAPE", col);
  out << head1 << "\n" << head2 << "\n" << std::string(head2.size(), '-') << "\n";
  for (const auto& r : rows) {
    std::string line = detail::pad_right(r.name, name_w);
    if (windows.empty()) {
      line += detail::pad(detail::fmt(r.report.mae), col) + detail::pad(detail::fmt(r.report.rmse), col) +
              detail::pad(detail::fmt_opt(r.report.mape), col);
    }
    for (std::size_t w : windows) {
      auto it = std::find_if(r.report.horizons.begin(), r.report.horizons.end(),
                             [&](const HorizonRow& h) { return h.window == w; });
      if (it == r.report.horizons.end()) {
        line += detail::pad("-", col) + detail::pad("-", col) + detail::pad("-", col);
      } else {
        line += detail::pad(detail::fmt(it->mae), col) + detail::pad(detail::fmt(it->rmse), col) +
                detail::pad(detail::fmt_opt(it->mape), col);
      }
    }
    out << line << "\n";
  }
  return out.str();
}

// Columns = diffusion step counts; rows = MAE / RMSE / MAPE.
inline std::string sweep_table(const std::vector<std::pair<std::size_t, EvalReport>>& points,
                               const std::string& title) {
  const std::size_t col = 10, name_w = 8;
  std::ostringstream out;
  out << title << "\n";
  std::string head = detail::pad_right("Steps", name_w);
  for (const auto& [n, r] : points) head += detail::pad(std::to_string(n), col);
  out << head << "\n" << std::string(head.size(), '-') << "\n";
  std::string mae = detail::pad_right("MAE", name_w), rmse = detail::pad_right("RMSE", name_w),
              mape = detail::pad_right("MAPE", name_w);
  for (const auto& [n, r] : points) {
    mae += detail::pad(detail::fmt(r.mae), col);
    rmse += detail::pad(detail::fmt(r.rmse), col);
    mape += detail::pad(detail::fmt_opt(r.mape), col);
  }
  out << mae << "\n" << rmse << "\n" << mape << "\n";
  return out.str();
}

struct Curve {
  std::string label;
  std::vector<double> values;
};

inline std::string line_chart_svg(const std::vector<Curve>& curves, const std::string& title, const std::string& x_label) {
  const double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 1;
  for (const auto& c : curves) {
    n = std::max(n, c.values.size());
    for (double v : c.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" << title
    << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
    << x_label << "</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0, y = H - B - (H - T - B) * k / 4.0;
    s << "<text x=\"" << L - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
      << detail::fmt(v, 3) << "</text>\n";
  }
  for (std::size_t c = 0; c < curves.size(); ++c) {
    s << "<polyline fill=\"none\" stroke=\"" << colours[c % 6] << "\" stroke-width=\"1.5\" points=\"";
    const auto& vals = curves[c].values;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (!std::isfinite(vals[i])) continue;
      const double x = L + (W - L - R) * (n == 1 ? 0.5 : static_cast<double>(i) / static_cast<double>(n - 1));
      const double y = H - B - (H - T - B) * (vals[i] - lo) / (hi - lo);
      s << detail::fmt(x, 1) << "," << detail::fmt(y, 1) << " ";
    }
    s << "\"/>\n";
    s << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (c + 1) << "\" text-anchor=\"end\" fill=\"" << colours[c % 6]
      << "\" font-family=\"sans-serif\" font-size=\"12\">" << curves[c].label << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

// Mean absolute error per lane, laid out as [roads x max lanes].
struct HeatmapGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::optional<double>> cells;  // row-major; empty = lane does not exist
  std::optional<double> at(std::size_t r, std::size_t c) const { return cells[r * cols + c]; }
};

inline HeatmapGrid lane_error_grid(const Matrix& pred, const Matrix& truth, const LaneNetwork& net) {
  if (pred.shape() != truth.shape() || pred.cols != net.lane_count()) throw ShapeError("lane_error_grid: shape mismatch");
  HeatmapGrid g;
  g.rows = net.road_count();
  for (auto j : net.lane_counts()) g.cols = std::max(g.cols, j);
  g.cells.assign(g.rows * g.cols, std::nullopt);
  for (std::size_t l = 0; l < net.lane_count(); ++l) {
    double s = 0.0;
    for (std::size_t t = 0; t < pred.rows; ++t) s += std::abs(pred(t, l) - truth(t, l));
    const auto pos = net.position(l);
    g.cells[pos.road * g.cols + pos.lane] = pred.rows ? s / static_cast<double>(pred.rows) : 0.0;
  }
  return g;
}

inline std::string heatmap_svg(const HeatmapGrid& g, const std::string& title) {
  const double cell = 36, L = 70, T = 40;
  const double W = L + cell * static_cast<double>(g.cols) + 20, H = T + cell * static_cast<double>(g.rows) + 40;
  double hi = 0.0;
  for (const auto& c : g.cells)
    if (c) hi = std::max(hi, *c);
  if (hi <= 0.0) hi = 1.0;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << title
    << "</text>\n";
  for (std::size_t r = 0; r < g.rows; ++r) {
    s << "<text x=\"" << L - 6 << "\" y=\"" << T + cell * (r + 0.6) << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
      << "font-size=\"11\">road " << r << "</text>\n";
    for (std::size_t c = 0; c < g.cols; ++c) {
      const auto v = g.at(r, c);
      if (!v) continue;  // absent lane: left as a void
      const int shade = static_cast<int>(std::lround(255.0 * (1.0 - *v / hi)));
      s << "<rect class=\"lane\" data-road=\"" << r << "\" data-lane=\"" << c << "\" x=\"" << L + cell * c << "\" y=\""
        << T + cell * r << "\" width=\"" << cell - 2 << "\" height=\"" << cell - 2 << "\" fill=\"rgb(255," << shade << ","
        << shade << ")\"><title>" << detail::fmt(*v, 3) << "</title></rect>\n";
    }
  }
  for (std::size_t c = 0; c < g.cols; ++c)
    s << "<text x=\"" << L + cell * (c + 0.5) << "\" y=\"" << T + cell * g.rows + 16
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << c << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace roaddiff
