#include "looplab/metrics_log.hpp"

#include <json.hpp>

#include "looplab/errors.hpp"

namespace looplab {

using json = nlohmann::json;

MetricsSink::MetricsSink(const std::string& path) : path_(path), out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open metrics log \"" + path + "\" for append");
}

void MetricsSink::emit(const MetricsRecord& r) {
    if (any_ && r.step <= last_step_)
        throw ContractError("metrics step " + std::to_string(r.step) +
                            " is not greater than previous step " + std::to_string(last_step_));
    out_ << metrics_record_to_json(r) << '\n';
    out_.flush();
    if (!out_) throw IoError("write to metrics log \"" + path_ + "\" failed");
    last_step_ = r.step;
    any_ = true;
}

std::string metrics_record_to_json(const MetricsRecord& r) {
    json j;
    j["step"] = r.step;
    j["train_loss"] = r.train_loss;
    j["lr_factor"] = r.lr_factor;
    j["pre_clip_grad_norm"] = r.pre_clip_grad_norm;
    j["resnorm"] = r.resnorm;
    j["block_grad_norms"] = r.block_grad_norms;
    j["tokens_seen"] = r.tokens_seen;
    if (r.has_val_bpb) j["val_bpb"] = r.val_bpb;
    return j.dump();
}

MetricsRecord metrics_record_from_json(const std::string& line) {
    const json j = json::parse(line);
    MetricsRecord r;
    r.step = j.at("step").get<int64_t>();
    r.train_loss = j.at("train_loss").get<double>();
    r.lr_factor = j.at("lr_factor").get<double>();
    r.pre_clip_grad_norm = j.at("pre_clip_grad_norm").get<double>();
    r.resnorm = j.at("resnorm").get<std::vector<double>>();
    r.block_grad_norms = j.at("block_grad_norms").get<std::map<std::string, double>>();
    r.tokens_seen = j.at("tokens_seen").get<int64_t>();
    if (j.contains("val_bpb")) {
        r.has_val_bpb = true;
        r.val_bpb = j.at("val_bpb").get<double>();
    }
    return r;
}

std::vector<MetricsRecord> read_metrics_log(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open metrics log \"" + path + "\"");
    std::vector<MetricsRecord> out;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(metrics_record_from_json(line));
        } catch (const std::exception& e) {
            throw IoError("metrics log \"" + path + "\" line " + std::to_string(line_no) + ": " +
                          e.what());
        }
    }
    return out;
}

void append_budget_points(const std::string& path, const std::vector<BudgetPoint>& points) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot open \"" + path + "\" for append");
    for (const auto& p : points) {
        json j;
        j["metric"] = p.metric;
        j["k"] = p.k;
        j["value"] = p.value;
        out << j.dump() << '\n';
    }
    out.flush();
    if (!out) throw IoError("write to \"" + path + "\" failed");
}

std::vector<BudgetPoint> read_budget_points(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open \"" + path + "\"");
    std::vector<BudgetPoint> out;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            out.push_back({j.at("metric").get<std::string>(), j.at("k").get<int>(),
                           j.at("value").get<double>()});
        } catch (const std::exception& e) {
            throw IoError("\"" + path + "\" line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace looplab
