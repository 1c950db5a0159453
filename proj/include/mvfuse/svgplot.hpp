#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mvfuse/csvio.hpp"
#include "mvfuse/errors.hpp"

namespace mvfuse {

// Minimal hand-emitted line plot: one polyline, axis box, min/max labels.
inline void svg_line_plot(const std::filesystem::path& path, const std::string& title,
                          const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("svg: x/y length mismatch");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");

    const double width = 640, height = 400, pad = 48;
    double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
    if (!xs.empty()) {
        x_lo = *std::min_element(xs.begin(), xs.end());
        x_hi = *std::max_element(xs.begin(), xs.end());
        y_lo = *std::min_element(ys.begin(), ys.end());
        y_hi = *std::max_element(ys.begin(), ys.end());
    }
    if (x_hi == x_lo) x_hi = x_lo + 1;
    if (y_hi == y_lo) y_hi = y_lo + 1;
    auto px = [&](double x) { return pad + (x - x_lo) / (x_hi - x_lo) * (width - 2 * pad); };
    auto py = [&](double y) { return height - pad - (y - y_lo) / (y_hi - y_lo) * (height - 2 * pad); };

    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "  <rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << width - 2 * pad
        << "\" height=\"" << height - 2 * pad << "\" fill=\"none\" stroke=\"#888\"/>\n";
    out << "  <text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">"
        << title << "</text>\n";
    out << "  <text x=\"" << pad << "\" y=\"" << height - pad + 16 << "\" font-size=\"10\">"
        << fmt_double(x_lo) << "</text>\n";
    out << "  <text x=\"" << width - pad << "\" y=\"" << height - pad + 16
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(x_hi) << "</text>\n";
    out << "  <text x=\"" << pad - 4 << "\" y=\"" << height - pad
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(y_lo) << "</text>\n";
    out << "  <text x=\"" << pad - 4 << "\" y=\"" << pad + 4
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(y_hi) << "</text>\n";
    if (!xs.empty()) {
        out << "  <polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (i) out << " ";
            out << fmt_double(px(xs[i])) << "," << fmt_double(py(ys[i]));
        }
        out << "\"/>\n";
    }
    out << "</svg>\n";
}

}  // namespace mvfuse
