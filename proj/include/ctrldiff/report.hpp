#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ctrldiff/common.hpp"
#include "ctrldiff/tensor.hpp"

namespace ctrldiff {

// Shared deterministic number formatting: report artifacts must be
// byte-reproducible, so all floats go through one format.
inline std::string fmt_g(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), "cannot open " + path + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    check(f.good(), "failed writing " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), "cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// 8-bit binary PGM; values mapped linearly from [-1,1] to [0,255]
template <typename Real>
std::string encode_pgm(const Tensor<Real>& img) {
    check(img.ndim() == 4 && img.dim(0) == 1 && img.dim(1) == 1,
          "encode_pgm expects a (1,1,h,w) map");
    int64_t H = img.dim(2), W = img.dim(3);
    std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
    for (int64_t i = 0; i < img.numel(); ++i) {
        double v = (static_cast<double>(img[i]) + 1.0) * 0.5 * 255.0;
        int b = static_cast<int>(v + 0.5);
        out.push_back(static_cast<char>(std::clamp(b, 0, 255)));
    }
    return out;
}

// Minimal deterministic SVG line plot; one polyline per series plus optional
// vertical marker lines.
struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

struct PlotVLine {
    std::string label;
    double x = 0.0;
};

inline std::string svg_line_plot(const std::string& title, const std::string& x_label,
                                 const std::string& y_label,
                                 const std::vector<PlotSeries>& series,
                                 const std::vector<PlotVLine>& vlines = {}) {
    const int W = 760, H = 440, ML = 64, MR = 24, MT = 40, MB = 48;
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series) {
        for (auto [x, y] : s.points) {
            if (first) {
                xmin = xmax = x;
                ymin = ymax = y;
                first = false;
            }
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    }
    for (const auto& v : vlines) {
        xmin = std::min(xmin, v.x);
        xmax = std::max(xmax, v.x);
    }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;

    auto px = [&](double x) {
        return ML + (x - xmin) / (xmax - xmin) * (W - ML - MR);
    };
    auto py = [&](double y) {
        return H - MB - (y - ymin) / (ymax - ymin) * (H - MT - MB);
    };

    std::string svg =
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(W) +
        "\" height=\"" + std::to_string(H) + "\" viewBox=\"0 0 " + std::to_string(W) + " " +
        std::to_string(H) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + std::to_string(W / 2) + "\" y=\"22\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\" font-size=\"15\">" + title + "</text>\n";
    // axes
    svg += "<line x1=\"" + fmt_g(ML) + "\" y1=\"" + fmt_g(H - MB) + "\" x2=\"" + fmt_g(W - MR) +
           "\" y2=\"" + fmt_g(H - MB) + "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + fmt_g(ML) + "\" y1=\"" + fmt_g(MT) + "\" x2=\"" + fmt_g(ML) +
           "\" y2=\"" + fmt_g(H - MB) + "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double fx = xmin + (xmax - xmin) * i / 4.0;
        double fy = ymin + (ymax - ymin) * i / 4.0;
        svg += "<text x=\"" + fmt_g(px(fx)) + "\" y=\"" + fmt_g(H - MB + 18) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" +
               fmt_g(fx) + "</text>\n";
        svg += "<text x=\"" + fmt_g(ML - 8) + "\" y=\"" + fmt_g(py(fy) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
               fmt_g(fy) + "</text>\n";
    }
    svg += "<text x=\"" + std::to_string((W + ML - MR) / 2) + "\" y=\"" + std::to_string(H - 10) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + x_label +
           "</text>\n";
    svg += "<text x=\"16\" y=\"" + std::to_string((H + MT - MB) / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" "
           "transform=\"rotate(-90 16 " + std::to_string((H + MT - MB) / 2) + ")\">" + y_label +
           "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const char* color = colors[si % 6];
        std::string pts;
        for (auto [x, y] : series[si].points) {
            pts += fmt_g(px(x)) + "," + fmt_g(py(y)) + " ";
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        svg += "<text x=\"" + std::to_string(W - MR - 8) + "\" y=\"" +
               std::to_string(MT + 18 * (static_cast<int>(si) + 1)) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" +
               color + "\">" + series[si].label + "</text>\n";
    }
    for (size_t vi = 0; vi < vlines.size(); ++vi) {
        const char* color = colors[vi % 6];
        svg += "<line x1=\"" + fmt_g(px(vlines[vi].x)) + "\" y1=\"" + fmt_g(MT) + "\" x2=\"" +
               fmt_g(px(vlines[vi].x)) + "\" y2=\"" + fmt_g(H - MB) + "\" stroke=\"" + color +
               "\" stroke-dasharray=\"5,4\"/>\n";
        svg += "<text x=\"" + fmt_g(px(vlines[vi].x) + 4) + "\" y=\"" +
               std::to_string(MT + 12 + 14 * static_cast<int>(vi)) +
               "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + color + "\">" +
               vlines[vi].label + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

}  // namespace ctrldiff
