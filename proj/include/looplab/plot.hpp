#pragma once

#include <string>
#include <vector>

namespace looplab {

// s_0 = x_0, s_t = factor*s_{t-1} + (1-factor)*x_t
std::vector<double> ema_smooth(const std::vector<double>& xs, double factor);

struct PlotSeries {
    std::string label;
    std::vector<double> xs;
    std::vector<double> ys;
};

// Standalone SVG line chart; non-finite samples break the polyline instead of
// corrupting the scale.
void write_line_chart_svg(const std::string& path, const std::string& title,
                          const std::string& x_label, const std::string& y_label,
                          const std::vector<PlotSeries>& series);

}  // namespace looplab
