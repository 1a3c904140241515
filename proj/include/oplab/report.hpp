#pragma once

// CSV tables with a schema header line and static SVG line charts drawn from
// them. Plots are always rendered from a CSV read back from disk.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace oplab {

inline constexpr const char* kCsvSchemaLine = "# schema=1";

/// Shortest text that round-trips the double.
inline std::string format_number(double v) {
  char buf[64];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw std::out_of_range("csv: no column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }

  double number(std::size_t row, const std::string& name) const { return std::stod(rows.at(row).at(column(name))); }
};

inline void write_csv(const std::filesystem::path& path, const CsvTable& table) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  out << kCsvSchemaLine << '\n';
  line(table.header);
  for (const auto& row : table.rows) {
    if (row.size() != table.header.size()) throw std::logic_error("csv row width differs from header");
    line(row);
  }
}

inline CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  CsvTable table;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (table.header.empty()) {
      table.header = std::move(cells);
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  return table;
}

struct PlotSeries {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> lo;  // optional band, same length as y
  std::vector<double> hi;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_y = false;
  int width = 640;
  int height = 420;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % 8];
}

}  // namespace detail

inline std::string render_svg(const std::vector<PlotSeries>& series, const PlotOptions& opt) {
  const double left = 70, right = 150, top = 40, bottom = 50;
  const double pw = opt.width - left - right, ph = opt.height - top - bottom;

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  double min_positive = std::numeric_limits<double>::infinity();
  auto visit_y = [&](double v) {
    if (!std::isfinite(v)) return;
    if (v > 0) min_positive = std::min(min_positive, v);
    y0 = std::min(y0, v);
    y1 = std::max(y1, v);
  };
  for (const auto& s : series) {
    for (double v : s.x) {
      x0 = std::min(x0, v);
      x1 = std::max(x1, v);
    }
    for (double v : s.y) visit_y(v);
    for (double v : s.lo) visit_y(v);
    for (double v : s.hi) visit_y(v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1;
  if (!std::isfinite(y0)) y0 = 0, y1 = 1;
  const bool log_y = opt.log_y && std::isfinite(min_positive);
  auto ty = [&](double v) {
    if (log_y) return std::log10(std::max(v, min_positive));
    return v;
  };
  double ty0 = log_y ? std::log10(min_positive) : y0, ty1 = ty(y1);
  if (ty1 <= ty0) ty1 = ty0 + 1.0;
  if (x1 <= x0) x1 = x0 + 1.0;
  auto px = [&](double v) { return left + (v - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return top + (1.0 - (ty(v) - ty0) / (ty1 - ty0)) * ph; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << opt.width << "\" height=\"" << opt.height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
      << detail::xml_escape(opt.title) << "</text>\n";
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0;
    const double fy = ty0 + (ty1 - ty0) * k / 4.0;
    const double yv = log_y ? std::pow(10.0, fy) : fy;
    char xl[32], yl[32];
    std::snprintf(xl, sizeof xl, "%g", fx);
    std::snprintf(yl, sizeof yl, "%.3g", yv);
    svg << "<text x=\"" << px(fx) << "\" y=\"" << top + ph + 16 << "\" text-anchor=\"middle\">" << xl << "</text>\n";
    svg << "<text x=\"" << left - 6 << "\" y=\"" << top + (1.0 - k / 4.0) * ph + 4 << "\" text-anchor=\"end\">" << yl
        << "</text>\n";
  }
  svg << "<text x=\"" << left + pw / 2 << "\" y=\"" << opt.height - 12 << "\" text-anchor=\"middle\">"
      << detail::xml_escape(opt.x_label) << "</text>\n";
  svg << "<text transform=\"translate(16," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << detail::xml_escape(opt.y_label) << (log_y ? " (log)" : "") << "</text>\n";

  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* color = detail::palette(i);
    if (!s.lo.empty() && s.lo.size() == s.x.size() && s.hi.size() == s.x.size()) {
      svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
      for (std::size_t k = 0; k < s.x.size(); ++k) svg << px(s.x[k]) << ',' << py(s.hi[k]) << ' ';
      for (std::size_t k = s.x.size(); k-- > 0;) svg << px(s.x[k]) << ',' << py(s.lo[k]) << ' ';
      svg << "\"/>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k) svg << px(s.x[k]) << ',' << py(s.y[k]) << ' ';
    svg << "\"/>\n";
    const double ly = top + 14 + 18.0 * static_cast<double>(i);
    svg << "<line x1=\"" << left + pw + 10 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 30 << "\" y2=\"" << ly - 4
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << left + pw + 34 << "\" y=\"" << ly << "\">" << detail::xml_escape(s.label) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace oplab
