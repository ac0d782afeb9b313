#pragma once

// Minimal static SVG charts: line plots over a shared x axis and
// step histograms.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mpatch/tensor.hpp"

namespace mpatch::svg {

struct Series {
  std::string label;
  std::vector<double> x, y;
};

namespace detail {

inline const char* color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                  "#9467bd", "#8c564b", "#17becf"};
  return palette[i % 7];
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

struct Axes {
  std::string title, xlabel, ylabel;
  double width = 640, height = 400;
  double left = 64, right = 160, top = 40, bottom = 52;
};

inline std::string line_plot(const std::vector<Series>& series, const Axes& ax) {
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series) {
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  const double pw = ax.width - ax.left - ax.right, ph = ax.height - ax.top - ax.bottom;
  auto px = [&](double v) { return ax.left + (v - x0) / (x1 - x0) * pw; };
  auto py = [&](double v) { return ax.top + (1.0 - (v - y0) / (y1 - y0)) * ph; };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << ax.width << "\" height=\""
    << ax.height << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << ax.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << detail::escape(ax.title) << "</text>\n"
    << "<rect x=\"" << ax.left << "\" y=\"" << ax.top << "\" width=\"" << pw << "\" height=\""
    << ph << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    o << "<text x=\"" << detail::num(px(xv)) << "\" y=\"" << ax.height - ax.bottom + 16
      << "\" text-anchor=\"middle\">" << detail::tick(xv) << "</text>\n"
      << "<text x=\"" << ax.left - 6 << "\" y=\"" << detail::num(py(yv) + 4)
      << "\" text-anchor=\"end\">" << detail::tick(yv) << "</text>\n"
      << "<line x1=\"" << ax.left << "\" x2=\"" << ax.left + pw << "\" y1=\""
      << detail::num(py(yv)) << "\" y2=\"" << detail::num(py(yv))
      << "\" stroke=\"#ddd\"/>\n";
  }
  o << "<text x=\"" << ax.left + pw / 2 << "\" y=\"" << ax.height - 12
    << "\" text-anchor=\"middle\">" << detail::escape(ax.xlabel) << "</text>\n"
    << "<text transform=\"translate(16," << ax.top + ph / 2
    << ") rotate(-90)\" text-anchor=\"middle\">" << detail::escape(ax.ylabel) << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    o << "<polyline fill=\"none\" stroke=\"" << detail::color(i) << "\" stroke-width=\"2\" points=\"";
    for (std::size_t j = 0; j < std::min(s.x.size(), s.y.size()); ++j) {
      o << detail::num(px(s.x[j])) << ',' << detail::num(py(s.y[j])) << ' ';
    }
    o << "\"/>\n";
    const double ly = ax.top + 16 + 18.0 * static_cast<double>(i);
    o << "<line x1=\"" << ax.width - ax.right + 12 << "\" x2=\"" << ax.width - ax.right + 32
      << "\" y1=\"" << ly << "\" y2=\"" << ly << "\" stroke=\"" << detail::color(i)
      << "\" stroke-width=\"2\"/>\n"
      << "<text x=\"" << ax.width - ax.right + 38 << "\" y=\"" << ly + 4 << "\">"
      << detail::escape(s.label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// Step outline of each histogram over equal-width bins on [lo, hi], with a
// dashed marker at each series' mean.
inline std::string histogram_plot(const std::vector<std::string>& labels,
                                  const std::vector<std::vector<std::size_t>>& counts,
                                  const std::vector<double>& means, double lo, double hi,
                                  const Axes& ax) {
  std::vector<Series> series;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    Series out{labels[s], {}, {}};
    const std::size_t bins = counts[s].size();
    double total = 0;
    for (auto c : counts[s]) total += static_cast<double>(c);
    for (std::size_t b = 0; b < bins; ++b) {
      const double l = lo + (hi - lo) * b / bins, r = lo + (hi - lo) * (b + 1) / bins;
      const double f = total > 0 ? static_cast<double>(counts[s][b]) / total : 0.0;
      out.x.insert(out.x.end(), {l, r});
      out.y.insert(out.y.end(), {f, f});
    }
    series.push_back(std::move(out));
  }
  std::string doc = line_plot(series, ax);
  std::ostringstream marks;
  const double pw = ax.width - ax.left - ax.right;
  for (std::size_t s = 0; s < means.size(); ++s) {
    const double x = ax.left + (means[s] - lo) / (hi - lo) * pw;
    marks << "<line x1=\"" << detail::num(x) << "\" x2=\"" << detail::num(x) << "\" y1=\""
          << ax.top << "\" y2=\"" << ax.height - ax.bottom << "\" stroke=\""
          << detail::color(s) << "\" stroke-dasharray=\"5,4\"/>\n";
  }
  doc.insert(doc.rfind("</svg>"), marks.str());
  return doc;
}

inline void write(const std::string& path, const std::string& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write plot '" + path + "'");
  out << doc;
}

}  // namespace mpatch::svg
