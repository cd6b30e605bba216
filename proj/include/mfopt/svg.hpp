#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "mfopt/errors.hpp"

namespace mfopt {

// Small deterministic SVG chart writer for the report bundle. Output is
// plain well-formed XML; numbers are formatted with fixed precision.
class SvgChart {
 public:
  SvgChart(int width, int height, std::string title)
      : w_(width), h_(height), title_(std::move(title)) {}

  struct Series {
    std::string label;
    std::string color;
    std::vector<std::pair<double, double>> points;
  };

  struct Bar {
    std::string label;
    std::string color;
    double value = 0.0;
  };

  void add_line(Series s) { lines_.push_back(std::move(s)); }
  void add_bar(Bar b) { bars_.push_back(std::move(b)); }
  void set_axis_labels(std::string x, std::string y) {
    x_label_ = std::move(x);
    y_label_ = std::move(y);
  }

  void write(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write svg: " + path);
    const int ml = 70, mr = 20, mt = 40, mb = 55;
    const double pw = w_ - ml - mr, ph = h_ - mt - mb;

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    if (!lines_.empty()) {
      xmin = ymin = 1e300;
      xmax = ymax = -1e300;
      for (const auto& s : lines_)
        for (const auto& [x, y] : s.points) {
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
        }
      if (xmax <= xmin) xmax = xmin + 1;
      ymin = std::min(ymin, 0.0);
      if (ymax <= ymin) ymax = ymin + 1;
      ymax *= 1.05;
    } else if (!bars_.empty()) {
      ymin = 0;
      ymax = 1e-12;
      for (const auto& b : bars_) ymax = std::max(ymax, b.value);
      ymax *= 1.15;
    }

    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
    auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };
    auto num = [](double v) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "%.3f", v);
      return std::string(buf);
    };

    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w_
       << "\" height=\"" << h_ << "\" viewBox=\"0 0 " << w_ << " " << h_
       << "\">\n";
    os << "<rect width=\"" << w_ << "\" height=\"" << h_
       << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << w_ / 2 << "\" y=\"22\" text-anchor=\"middle\" "
          "font-family=\"sans-serif\" font-size=\"15\">"
       << escape(title_) << "</text>\n";

    // axes
    os << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw
       << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
       << "\" y2=\"" << mt + ph << "\" stroke=\"black\"/>\n";
    if (!x_label_.empty())
      os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << h_ - 8
         << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
            "font-size=\"12\">"
         << escape(x_label_) << "</text>\n";
    if (!y_label_.empty())
      os << "<text x=\"16\" y=\"" << mt + ph / 2
         << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
            "font-size=\"12\" transform=\"rotate(-90 16 "
         << mt + ph / 2 << ")\">" << escape(y_label_) << "</text>\n";

    // y ticks
    for (int t = 0; t <= 4; ++t) {
      const double v = ymin + (ymax - ymin) * t / 4.0;
      os << "<line x1=\"" << ml - 4 << "\" y1=\"" << num(py(v)) << "\" x2=\""
         << ml << "\" y2=\"" << num(py(v)) << "\" stroke=\"black\"/>\n";
      os << "<text x=\"" << ml - 8 << "\" y=\"" << num(py(v) + 4)
         << "\" text-anchor=\"end\" font-family=\"sans-serif\" "
            "font-size=\"10\">"
         << num(v) << "</text>\n";
    }

    if (!bars_.empty()) {
      const double bw = pw / (bars_.size() * 1.5 + 0.5);
      for (size_t i = 0; i < bars_.size(); ++i) {
        const double x = ml + bw * (0.5 + 1.5 * double(i));
        const double y = py(bars_[i].value);
        os << "<rect x=\"" << num(x) << "\" y=\"" << num(y) << "\" width=\""
           << num(bw) << "\" height=\"" << num(mt + ph - y) << "\" fill=\""
           << bars_[i].color << "\"/>\n";
        os << "<text x=\"" << num(x + bw / 2) << "\" y=\"" << mt + ph + 16
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
              "font-size=\"10\">"
           << escape(bars_[i].label) << "</text>\n";
        os << "<text x=\"" << num(x + bw / 2) << "\" y=\"" << num(y - 4)
           << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
              "font-size=\"10\">"
           << num(bars_[i].value) << "</text>\n";
      }
    }

    for (size_t si = 0; si < lines_.size(); ++si) {
      const auto& s = lines_[si];
      os << "<polyline fill=\"none\" stroke=\"" << s.color
         << "\" stroke-width=\"2\" points=\"";
      for (const auto& [x, y] : s.points)
        os << num(px(x)) << "," << num(py(y)) << " ";
      os << "\"/>\n";
      for (const auto& [x, y] : s.points)
        os << "<circle cx=\"" << num(px(x)) << "\" cy=\"" << num(py(y))
           << "\" r=\"3\" fill=\"" << s.color << "\"/>\n";
      os << "<text x=\"" << ml + pw - 6 << "\" y=\"" << mt + 14 + 14 * double(si)
         << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" "
            "fill=\""
         << s.color << "\">" << escape(s.label) << "</text>\n";
    }
    os << "</svg>\n";
  }

 private:
  static std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '&')
        out += "&amp;";
      else if (c == '<')
        out += "&lt;";
      else if (c == '>')
        out += "&gt;";
      else
        out += c;
    }
    return out;
  }

  int w_, h_;
  std::string title_;
  std::string x_label_, y_label_;
  std::vector<Series> lines_;
  std::vector<Bar> bars_;
};

}  // namespace mfopt
