#pragma once

// Minimal static SVG charts: one line chart and one bar chart.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace eurobert::svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

inline std::string num(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

constexpr double kW = 640, kH = 400, kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
inline const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

inline std::string frame(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">" << escape(xlabel) << "</text>\n";
  os << "<text x=\"16\" y=\"" << kH / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << kH / 2 << ")\">" << escape(ylabel) << "</text>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kH - kBottom << "\" x2=\"" << kW - kRight << "\" y2=\"" << kH - kBottom << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kH - kBottom << "\" stroke=\"black\"/>\n";
  return os.str();
}

inline std::string line_chart(const std::string& title, const std::string& xlabel, const std::string& ylabel, const std::vector<Series>& series) {
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  if (!(x1 > x0)) x1 = x0 + 1;
  if (!(y1 > y0)) y1 = y0 + 1;
  auto px = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight); };
  auto py = [&](double y) { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); };
  std::ostringstream os;
  os << frame(title, xlabel, ylabel);
  for (int t = 0; t <= 4; ++t) {
    const double y = y0 + (y1 - y0) * t / 4.0, x = x0 + (x1 - x0) * t / 4.0;
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << num(y) << "</text>\n";
    os << "<text x=\"" << px(x) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << num(x) << "</text>\n";
  }
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto* color = kColors[i % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (auto [x, y] : series[i].points) os << px(x) << "," << py(y) << " ";
    os << "\"/>\n";
    os << "<text x=\"" << kW - kRight - 4 << "\" y=\"" << kTop + 14 * (i + 1) << "\" text-anchor=\"end\" fill=\"" << color << "\">"
       << escape(series[i].name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Bars may be absent (drawn as a gap with a label).
inline std::string bar_chart(const std::string& title, const std::string& ylabel, const std::vector<std::pair<std::string, std::optional<double>>>& bars) {
  double y0 = 0, y1 = 0;
  for (const auto& [label, v] : bars)
    if (v) y0 = std::min(y0, *v), y1 = std::max(y1, *v);
  if (!(y1 > y0)) y1 = y0 + 1;
  auto py = [&](double y) { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); };
  const double slot = (kW - kLeft - kRight) / static_cast<double>(std::max<std::size_t>(bars.size(), 1));
  std::ostringstream os;
  os << frame(title, "", ylabel);
  os << "<line x1=\"" << kLeft << "\" y1=\"" << py(0) << "\" x2=\"" << kW - kRight << "\" y2=\"" << py(0) << "\" stroke=\"#888\"/>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const double cx = kLeft + slot * (i + 0.5);
    const auto& [label, v] = bars[i];
    if (v) {
      const double top = py(std::max(*v, 0.0)), bottom = py(std::min(*v, 0.0));
      os << "<rect x=\"" << cx - slot * 0.35 << "\" y=\"" << top << "\" width=\"" << slot * 0.7 << "\" height=\"" << bottom - top
         << "\" fill=\"" << kColors[0] << "\"/>\n";
      os << "<text x=\"" << cx << "\" y=\"" << top - 4 << "\" text-anchor=\"middle\">" << num(*v) << "</text>\n";
    } else {
      os << "<text x=\"" << cx << "\" y=\"" << py(0) - 4 << "\" text-anchor=\"middle\" fill=\"#888\">n/a</text>\n";
    }
    os << "<text x=\"" << cx << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << escape(label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

inline void write(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << content;
}

}  // namespace eurobert::svg
