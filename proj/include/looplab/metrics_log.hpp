#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "looplab/diagnostics.hpp"

namespace looplab {

// Append-only line-delimited JSON sink for training metrics. One record per
// line, flushed on every write; steps must be strictly increasing.
class MetricsSink {
  public:
    explicit MetricsSink(const std::string& path);
    void emit(const MetricsRecord& record);
    const std::string& path() const { return path_; }

  private:
    std::string path_;
    std::ofstream out_;
    int64_t last_step_ = -1;
    bool any_ = false;
};

std::string metrics_record_to_json(const MetricsRecord& record);
MetricsRecord metrics_record_from_json(const std::string& line);

// Throws IoError naming the offending line on parse failure.
std::vector<MetricsRecord> read_metrics_log(const std::string& path);

// Budget-evaluation curve point, written in the same line-delimited format.
struct BudgetPoint {
    std::string metric;
    int k = 0;
    double value = 0.0;
};

void append_budget_points(const std::string& path, const std::vector<BudgetPoint>& points);
std::vector<BudgetPoint> read_budget_points(const std::string& path);

}  // namespace looplab
