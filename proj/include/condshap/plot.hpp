// Minimal SVG plots of explanation results: bar, waterfall and scatter.
// Layout is computed separately from rendering so it can be checked.

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "condshap/common.hpp"

namespace condshap {

struct PlotBar {
  std::string label;
  double start = 0.0;  // waterfall bars run from start to end
  double end = 0.0;
  double value() const { return end - start; }
};

struct PlotPoint {
  double x = 0.0;
  double y = 0.0;
};

enum class PlotKind { bar, waterfall, scatter };

inline PlotKind parse_plot_kind(const std::string& s) {
  if (s == "bar") return PlotKind::bar;
  if (s == "waterfall") return PlotKind::waterfall;
  if (s == "scatter") return PlotKind::scatter;
  throw InvalidArgument("unknown plot kind '" + s + "' (bar, waterfall, scatter)");
}

/// Features ranked by |phi|, the top_k largest kept and the rest summed in
/// one remainder bar. top_k <= 0 keeps everything. phi excludes phi_0.
inline std::vector<PlotBar> bar_layout(const std::vector<std::string>& names, const std::vector<double>& phi, int top_k) {
  if (names.size() != phi.size()) throw InvalidArgument("bar plot: names and values differ in length");
  std::vector<std::size_t> order(phi.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(phi[a]) > std::abs(phi[b]); });
  const std::size_t keep = top_k <= 0 ? order.size() : std::min(order.size(), static_cast<std::size_t>(top_k));
  std::vector<PlotBar> bars;
  for (std::size_t i = 0; i < keep; ++i) bars.push_back({names[order[i]], 0.0, phi[order[i]]});
  if (keep < order.size()) {
    double rest = 0.0;
    for (std::size_t i = keep; i < order.size(); ++i) rest += phi[order[i]];
    bars.push_back({std::to_string(order.size() - keep) + " other features", 0.0, rest});
  }
  return bars;
}

/// phi_0 first, then contributions by increasing |phi|, each bar starting
/// where the previous one ended.
inline std::vector<PlotBar> waterfall_layout(const std::vector<std::string>& names, double phi0,
                                             const std::vector<double>& phi) {
  if (names.size() != phi.size()) throw InvalidArgument("waterfall plot: names and values differ in length");
  std::vector<std::size_t> order(phi.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return std::abs(phi[a]) < std::abs(phi[b]); });
  std::vector<PlotBar> bars{{"none", 0.0, phi0}};
  double at = phi0;
  for (auto j : order) {
    bars.push_back({names[j], at, at + phi[j]});
    at += phi[j];
  }
  return bars;
}

inline std::vector<PlotPoint> scatter_layout(const std::vector<double>& feature, const std::vector<double>& phi) {
  if (feature.size() != phi.size()) throw InvalidArgument("scatter plot: feature values and Shapley values differ in length");
  std::vector<PlotPoint> out;
  for (std::size_t i = 0; i < phi.size(); ++i) out.push_back({feature[i], phi[i]});
  return out;
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double x) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << x;
  return os.str();
}

inline std::pair<double, double> padded_range(double lo, double hi) {
  if (!(hi > lo)) {
    lo -= 1.0;
    hi += 1.0;
  }
  const double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

}  // namespace detail

/// Horizontal bars, one row per bar, in layout order.
inline std::string render_bars_svg(const std::vector<PlotBar>& bars, const std::string& title) {
  const double width = 640, left = 170, right = 20, top = 40, row = 24;
  const double height = top + row * static_cast<double>(bars.size()) + 30;
  double lo = 0.0, hi = 0.0;
  for (const auto& b : bars) {
    lo = std::min({lo, b.start, b.end});
    hi = std::max({hi, b.start, b.end});
  }
  std::tie(lo, hi) = detail::padded_range(lo, hi);
  const auto sx = [&](double v) { return left + (v - lo) / (hi - lo) * (width - left - right); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << detail::xml_escape(title) << "</text>\n";
  os << "<line x1=\"" << detail::num(sx(0)) << "\" y1=\"" << top - 5 << "\" x2=\"" << detail::num(sx(0)) << "\" y2=\""
     << height - 25 << "\" stroke=\"#888\"/>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double y = top + row * static_cast<double>(i);
    const double x0 = sx(std::min(b.start, b.end)), x1 = sx(std::max(b.start, b.end));
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 15 << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
       << "font-size=\"12\">" << detail::xml_escape(b.label) << "</text>\n";
    os << "<rect class=\"bar\" x=\"" << detail::num(x0) << "\" y=\"" << y + 3 << "\" width=\"" << detail::num(std::max(x1 - x0, 0.5))
       << "\" height=\"" << row - 6 << "\" fill=\"" << (b.value() >= 0 ? "#1b9e77" : "#d95f02") << "\"/>\n";
    os << "<text x=\"" << detail::num(x1 + 4) << "\" y=\"" << y + 15 << "\" font-family=\"sans-serif\" font-size=\"10\">"
       << format_double(b.value()) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline std::string render_scatter_svg(const std::vector<PlotPoint>& pts, const std::string& x_label,
                                      const std::string& title) {
  const double width = 480, height = 360, margin = 50;
  double xlo = 0, xhi = 0, ylo = 0, yhi = 0;
  if (!pts.empty()) {
    xlo = xhi = pts[0].x;
    ylo = yhi = pts[0].y;
  }
  for (const auto& p : pts) {
    xlo = std::min(xlo, p.x);
    xhi = std::max(xhi, p.x);
    ylo = std::min(ylo, p.y);
    yhi = std::max(yhi, p.y);
  }
  std::tie(xlo, xhi) = detail::padded_range(xlo, xhi);
  std::tie(ylo, yhi) = detail::padded_range(ylo, yhi);
  const auto sx = [&](double v) { return margin + (v - xlo) / (xhi - xlo) * (width - 2 * margin); };
  const auto sy = [&](double v) { return height - margin - (v - ylo) / (yhi - ylo) * (height - 2 * margin); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << detail::xml_escape(title) << "</text>\n";
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << width - 2 * margin << "\" height=\""
     << height - 2 * margin << "\" fill=\"none\" stroke=\"#888\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"" << height - 15 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"12\">" << detail::xml_escape(x_label) << "</text>\n";
  for (const auto& p : pts)
    os << "<circle class=\"point\" cx=\"" << detail::num(sx(p.x)) << "\" cy=\"" << detail::num(sy(p.y))
       << "\" r=\"3\" fill=\"#7570b3\"/>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace condshap
