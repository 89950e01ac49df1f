#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace vegcast::report {

struct Series {
  std::string label;
  std::vector<double> y;  // NaN entries leave gaps
};

struct Grid {
  std::string title;
  int height = 0, width = 0;
  std::vector<double> values;  // row-major; NaN renders as no-data
};

namespace detail {

inline std::string fmt(double v, int digits = 2) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else if (c == '"') out += "&quot;";
    else out += c;
  }
  return out;
}

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> p{"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  return p;
}

inline std::string header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" + std::to_string(h) +
         "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

inline std::string text(double x, double y, const std::string& s, const std::string& anchor = "start", int size = 12) {
  return "<text x=\"" + fmt(x) + "\" y=\"" + fmt(y) + "\" text-anchor=\"" + anchor + "\" font-size=\"" +
         std::to_string(size) + "\">" + escape(s) + "</text>\n";
}

inline std::string line(double x1, double y1, double x2, double y2, const std::string& color = "#000") {
  return "<line x1=\"" + fmt(x1) + "\" y1=\"" + fmt(y1) + "\" x2=\"" + fmt(x2) + "\" y2=\"" + fmt(y2) +
         "\" stroke=\"" + color + "\"/>\n";
}

/// Finite range of values, padded so flat data still gets an axis.
inline std::pair<double, double> range(const std::vector<double>& v) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double x : v)
    if (std::isfinite(x)) lo = std::min(lo, x), hi = std::max(hi, x);
  if (!std::isfinite(lo)) return {0, 1};
  if (hi - lo < 1e-9) return {lo - 0.5 * std::max(std::abs(lo), 1e-3), hi + 0.5 * std::max(std::abs(hi), 1e-3)};
  return {lo, hi};
}

struct Frame {
  double left = 60, top = 40, width = 520, height = 300;
  double lo = 0, hi = 1;
  double y(double v) const { return top + height * (1 - (v - lo) / (hi - lo)); }
};

inline std::string axes(const Frame& f, const std::string& title, const std::string& xlabel, const std::string& ylabel) {
  std::string s = text(f.left + f.width / 2, 22, title, "middle", 14);
  s += line(f.left, f.top + f.height, f.left + f.width, f.top + f.height);
  s += line(f.left, f.top, f.left, f.top + f.height);
  for (int i = 0; i <= 4; ++i) {
    const double v = f.lo + (f.hi - f.lo) * i / 4.0;
    s += line(f.left - 4, f.y(v), f.left, f.y(v));
    s += text(f.left - 6, f.y(v) + 4, fmt(v, 3), "end", 10);
  }
  s += text(f.left + f.width / 2, f.top + f.height + 36, xlabel, "middle");
  s += "<text x=\"14\" y=\"" + fmt(f.top + f.height / 2) + "\" transform=\"rotate(-90 14 " + fmt(f.top + f.height / 2) +
       ")\" text-anchor=\"middle\">" + escape(ylabel) + "</text>\n";
  return s;
}

inline std::string no_data(const Frame& f) {
  return text(f.left + f.width / 2, f.top + f.height / 2, "no data", "middle", 16);
}

}  // namespace detail

/// Line chart of one curve per series against the step index (scaled by `x_step`).
inline std::string line_chart(const std::string& title, const std::vector<Series>& series, const std::string& xlabel,
                              const std::string& ylabel, double x_step = 1.0) {
  using namespace detail;
  std::vector<double> all;
  std::size_t n = 0;
  for (const auto& s : series) all.insert(all.end(), s.y.begin(), s.y.end()), n = std::max(n, s.y.size());
  Frame f;
  std::tie(f.lo, f.hi) = range(all);
  std::string svg = header(760, 400) + axes(f, title, xlabel, ylabel);
  bool any = false;
  for (double v : all) any = any || std::isfinite(v);
  if (!any) return svg + no_data(f) + "</svg>\n";
  auto x = [&](std::size_t i) { return f.left + (n <= 1 ? f.width / 2 : f.width * i / static_cast<double>(n - 1)); };
  for (std::size_t i = 0; i < n; i += std::max<std::size_t>(1, n / 10)) {
    svg += line(x(i), f.top + f.height, x(i), f.top + f.height + 4);
    svg += text(x(i), f.top + f.height + 16, fmt((i + 1) * x_step, 0), "middle", 10);
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& color = palette()[k % palette().size()];
    std::string path;
    bool pen = false;
    for (std::size_t i = 0; i < series[k].y.size(); ++i) {
      if (!std::isfinite(series[k].y[i])) {
        pen = false;
        continue;
      }
      path += (pen ? " L " : " M ") + fmt(x(i)) + " " + fmt(f.y(series[k].y[i]));
      pen = true;
    }
    if (!path.empty()) svg += "<path d=\"" + path.substr(1) + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<rect x=\"600\" y=\"" + fmt(f.top + 18.0 * k) + "\" width=\"12\" height=\"12\" fill=\"" + color + "\"/>\n";
    svg += text(618, f.top + 18.0 * k + 10, series[k].label);
  }
  return svg + "</svg>\n";
}

/// Grouped bars: one group per category, one bar per series.
inline std::string bar_chart(const std::string& title, const std::vector<std::string>& categories,
                             const std::vector<Series>& series, const std::string& ylabel) {
  using namespace detail;
  std::vector<double> all{0.0};
  for (const auto& s : series) all.insert(all.end(), s.y.begin(), s.y.end());
  Frame f;
  std::tie(f.lo, f.hi) = range(all);
  f.lo = std::min(f.lo, 0.0);
  std::string svg = header(760, 400) + axes(f, title, "", ylabel);
  if (categories.empty() || series.empty()) return svg + no_data(f) + "</svg>\n";
  const double group = f.width / categories.size();
  const double bar = group * 0.8 / series.size();
  for (std::size_t c = 0; c < categories.size(); ++c) {
    svg += text(f.left + group * (c + 0.5), f.top + f.height + 16, categories[c], "middle", 10);
    for (std::size_t k = 0; k < series.size(); ++k) {
      if (c >= series[k].y.size() || !std::isfinite(series[k].y[c])) continue;
      const double v = series[k].y[c];
      const double y0 = f.y(0.0), y1 = f.y(v);
      svg += "<rect x=\"" + fmt(f.left + group * c + group * 0.1 + bar * k) + "\" y=\"" + fmt(std::min(y0, y1)) +
             "\" width=\"" + fmt(bar) + "\" height=\"" + fmt(std::abs(y1 - y0)) + "\" fill=\"" +
             palette()[k % palette().size()] + "\"/>\n";
    }
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    svg += "<rect x=\"600\" y=\"" + fmt(f.top + 18.0 * k) + "\" width=\"12\" height=\"12\" fill=\"" +
           palette()[k % palette().size()] + "\"/>\n";
    svg += text(618, f.top + 18.0 * k + 10, series[k].label);
  }
  return svg + "</svg>\n";
}

/// Heat map of a grid on a white-to-blue ramp; no-data cells are grey.
inline std::string grid_map(const Grid& g, const std::string& value_label) {
  using namespace detail;
  const int cell = std::max(4, 320 / std::max({g.height, g.width, 1}));
  const int w = 100 + cell * g.width + 120, h = 60 + cell * g.height + 30;
  std::string svg = header(w, h) + text(w / 2.0, 22, g.title, "middle", 14);
  auto [lo, hi] = range(g.values);
  if (g.height == 0 || g.width == 0) return svg + text(w / 2.0, h / 2.0, "no data", "middle", 16) + "</svg>\n";
  for (int y = 0; y < g.height; ++y)
    for (int x = 0; x < g.width; ++x) {
      const double v = g.values[static_cast<std::size_t>(y) * g.width + x];
      std::string color = "#cccccc";
      if (std::isfinite(v)) {
        const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
        char buf[8];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(255 - 224 * t), static_cast<int>(255 - 150 * t),
                      255 - static_cast<int>(75 * t));
        color = buf;
      }
      svg += "<rect x=\"" + std::to_string(100 + x * cell) + "\" y=\"" + std::to_string(40 + y * cell) + "\" width=\"" +
             std::to_string(cell) + "\" height=\"" + std::to_string(cell) + "\" fill=\"" + color + "\"/>\n";
    }
  const double lx = 100 + cell * g.width + 20;
  svg += text(lx, 52, value_label) + text(lx, 70, "max " + fmt(hi, 4)) + text(lx, 88, "min " + fmt(lo, 4));
  return svg + "</svg>\n";
}

}  // namespace vegcast::report
