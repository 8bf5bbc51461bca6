#include "looplab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "looplab/errors.hpp"

namespace looplab {

std::vector<double> ema_smooth(const std::vector<double>& xs, double factor) {
    std::vector<double> out;
    out.reserve(xs.size());
    double s = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        s = i == 0 ? xs[0] : factor * s + (1.0 - factor) * xs[i];
        out.push_back(s);
    }
    return out;
}

namespace {

constexpr double kW = 900, kH = 540;
constexpr double kL = 70, kR = 160, kT = 50, kB = 55;  // margins, legend on the right

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(5);
    os << v;
    return os.str();
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series) {
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool any = false;
    for (const auto& s : series)
        for (size_t i = 0; i < s.xs.size(); ++i) {
            if (!std::isfinite(s.xs[i]) || !std::isfinite(s.ys[i])) continue;
            if (!any) {
                xmin = xmax = s.xs[i];
                ymin = ymax = s.ys[i];
                any = true;
            } else {
                xmin = std::min(xmin, s.xs[i]);
                xmax = std::max(xmax, s.xs[i]);
                ymin = std::min(ymin, s.ys[i]);
                ymax = std::max(ymax, s.ys[i]);
            }
        }
    if (!any) throw DegenerateInputError("plot \"" + title + "\" has no finite samples");
    if (xmax - xmin < 1e-12) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (ymax - ymin < 1e-12) {
        ymin -= 0.5;
        ymax += 0.5;
    }

    const double px0 = kL, px1 = kW - kR, py0 = kH - kB, py1 = kT;
    auto sx = [&](double x) { return px0 + (x - xmin) / (xmax - xmin) * (px1 - px0); };
    auto sy = [&](double y) { return py0 + (y - ymin) / (ymax - ymin) * (py1 - py0); };

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
        << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
    svg << "<rect width=\"" << kW << "\" height=\"" << kH << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << kW / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"18\" "
           "font-family=\"sans-serif\">"
        << escape_xml(title) << "</text>\n";

    // frame and ticks
    svg << "<rect x=\"" << px0 << "\" y=\"" << py1 << "\" width=\"" << px1 - px0 << "\" height=\""
        << py0 - py1 << "\" fill=\"none\" stroke=\"#333\"/>\n";
    for (int t = 0; t <= 5; ++t) {
        const double fx = xmin + (xmax - xmin) * t / 5.0;
        const double fy = ymin + (ymax - ymin) * t / 5.0;
        svg << "<line x1=\"" << sx(fx) << "\" y1=\"" << py0 << "\" x2=\"" << sx(fx) << "\" y2=\""
            << py0 + 5 << "\" stroke=\"#333\"/>\n";
        svg << "<text x=\"" << sx(fx) << "\" y=\"" << py0 + 20
            << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(fx)
            << "</text>\n";
        svg << "<line x1=\"" << px0 - 5 << "\" y1=\"" << sy(fy) << "\" x2=\"" << px0 << "\" y2=\""
            << sy(fy) << "\" stroke=\"#333\"/>\n";
        svg << "<text x=\"" << px0 - 8 << "\" y=\"" << sy(fy) + 4
            << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(fy)
            << "</text>\n";
        svg << "<line x1=\"" << px0 << "\" y1=\"" << sy(fy) << "\" x2=\"" << px1 << "\" y2=\""
            << sy(fy) << "\" stroke=\"#eee\"/>\n";
    }
    svg << "<text x=\"" << (px0 + px1) / 2 << "\" y=\"" << kH - 12
        << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">"
        << escape_xml(x_label) << "</text>\n";
    svg << "<text x=\"18\" y=\"" << (py0 + py1) / 2
        << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
           "transform=\"rotate(-90 18 "
        << (py0 + py1) / 2 << ")\">" << escape_xml(y_label) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const char* color = kPalette[si % (sizeof(kPalette) / sizeof(kPalette[0]))];
        std::ostringstream points;
        bool open = false;
        auto flush_poly = [&]() {
            if (open)
                svg << "<polyline fill=\"none\" stroke=\"" << color
                    << "\" stroke-width=\"1.5\" points=\"" << points.str() << "\"/>\n";
            points.str("");
            open = false;
        };
        for (size_t i = 0; i < series[si].xs.size(); ++i) {
            const double x = series[si].xs[i], y = series[si].ys[i];
            if (!std::isfinite(x) || !std::isfinite(y)) {
                flush_poly();
                continue;
            }
            points << sx(x) << "," << sy(y) << " ";
            open = true;
        }
        flush_poly();

        const double ly = kT + 18.0 * double(si);
        svg << "<line x1=\"" << px1 + 10 << "\" y1=\"" << ly << "\" x2=\"" << px1 + 30
            << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        svg << "<text x=\"" << px1 + 35 << "\" y=\"" << ly + 4
            << "\" font-size=\"12\" font-family=\"sans-serif\">" << escape_xml(series[si].label)
            << "</text>\n";
    }
    svg << "</svg>\n";

    std::ofstream out(path);
    if (!out) throw IoError("cannot write plot \"" + path + "\"");
    out << svg.str();
    if (!out) throw IoError("write to plot \"" + path + "\" failed");
}

}  // namespace looplab
