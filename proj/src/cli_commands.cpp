#include "looplab/cli.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "looplab/checkpoint.hpp"
#include "looplab/data_eval.hpp"
#include "looplab/metrics_log.hpp"
#include "looplab/plot.hpp"
#include "looplab/trainer.hpp"

namespace looplab {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::vector<int> parse_k_list_csv(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (const std::exception&) {
            throw ConfigError("bad --k-list entry \"" + tok + "\"");
        }
    }
    if (out.empty()) throw ConfigError("--k-list is empty");
    return out;
}

std::string path_stem(const std::string& p) { return fs::path(p).stem().string(); }

void check_checkpoint_matches_config(const BackboneConfig& a, const BackboneConfig& b) {
    if (a.d_model != b.d_model || a.n_layers != b.n_layers || a.n_q_heads != b.n_q_heads ||
        a.n_kv_heads != b.n_kv_heads || a.head_dim != b.head_dim ||
        a.vocab_size != b.vocab_size || a.attn_type != b.attn_type || a.mla_rank != b.mla_rank ||
        a.window_pattern != b.window_pattern)
        throw ContractError("checkpoint dimensions do not match the config (checkpoint d=" +
                            std::to_string(a.d_model) + " L=" + std::to_string(a.n_layers) +
                            ", config d=" + std::to_string(b.d_model) +
                            " L=" + std::to_string(b.n_layers) + ")");
}

}  // namespace

int cmd_train(const std::string& config_path, const std::string& out_dir,
              std::optional<uint64_t> seed_override, int64_t steps_override) {
    auto xc = load_experiment_config(config_path);
    if (seed_override) xc.seed = *seed_override;

    fs::create_directories(out_dir);
    save_experiment_config(xc, out_dir + "/config.json");

    TrainPaths paths;
    paths.metrics_path = out_dir + "/metrics.jsonl";
    paths.checkpoint_dir = out_dir;
    const auto outcome = train_model<float>(xc, paths, std::cout, steps_override);
    std::cout << "training finished: " << collapse_status_name(outcome.status) << ", final loss "
              << outcome.final_loss << ", steps " << outcome.steps_run << "\n";
    return outcome.status == CollapseStatus::diverged ? 3 : 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& out_dir, const std::string& k_list_csv) {
    auto xc = load_experiment_config(config_path);
    auto lc = load_checkpoint<float>(checkpoint_path);
    check_checkpoint_matches_config(lc.weights.cfg, backbone_config(xc));

    std::vector<int> k_list = k_list_csv.empty() ? xc.k_list : parse_k_list_csv(k_list_csv);
    const auto corpus = load_corpus(xc.corpus, xc.val_fraction, xc.seed + 1);
    if (int64_t(corpus.val_bytes.size()) < lc.weights.cfg.seq_len + 1)
        throw DegenerateInputError("validation split is shorter than one window");

    std::vector<EvalTask> tasks;
    for (const auto& tp : xc.task_files) tasks.push_back(load_task(tp));

    const auto curves = budget_eval(lc.weights, corpus.val_bytes, tasks, k_list,
                                    experiment_variant(xc), lc.weights.cfg.seq_len);

    std::cout << std::left << std::setw(10) << "metric" << std::setw(6) << "K"
              << "value\n";
    std::vector<BudgetPoint> flat;
    for (const auto& c : curves)
        for (const auto& [k, v] : c.points) {
            std::cout << std::left << std::setw(10) << c.metric << std::setw(6) << k
                      << std::setprecision(10) << v << "\n";
            flat.push_back({c.metric, k, v});
        }

    fs::create_directories(out_dir);
    append_budget_points(out_dir + "/eval_curves.jsonl", flat);
    return 0;
}

int cmd_diagnose(const std::vector<std::string>& config_paths, int64_t steps,
                 const std::string& out_dir) {
    if (config_paths.empty()) throw ConfigError("diagnose needs at least one --config");
    fs::create_directories(out_dir);

    json summary = json::array();
    for (size_t i = 0; i < config_paths.size(); ++i) {
        auto xc = load_experiment_config(config_paths[i]);
        const std::string run_name = std::to_string(i) + "_" + xc.variant + "_k" +
                                     std::to_string(xc.k_train);
        const std::string run_dir = out_dir + "/" + run_name;
        fs::create_directories(run_dir);

        TrainPaths paths;
        paths.metrics_path = run_dir + "/metrics.jsonl";
        paths.checkpoint_dir = "";  // diagnostic windows keep no checkpoints
        std::cout << "== diagnose " << config_paths[i] << " (" << run_name << ", " << steps
                  << " steps)\n";
        const auto outcome = train_model<float>(xc, paths, std::cout, steps,
                                                /*final_val=*/false);

        // replay the log rather than trusting in-memory state
        const auto records = read_metrics_log(paths.metrics_path);
        std::vector<double> res_final, res_max;
        for (const auto& r : records) {
            if (r.resnorm.empty()) continue;
            res_final = r.resnorm;
            if (res_max.size() < r.resnorm.size()) res_max.resize(r.resnorm.size(), 0.0);
            for (size_t t = 0; t < r.resnorm.size(); ++t)
                res_max[t] = std::max(res_max[t], r.resnorm[t]);
        }
        json entry;
        entry["config"] = config_paths[i];
        entry["run"] = run_name;
        entry["variant"] = xc.variant;
        entry["k_train"] = xc.k_train;
        entry["steps"] = outcome.steps_run;
        entry["status"] = collapse_status_name(outcome.status);
        entry["final_loss"] = outcome.final_loss;
        entry["resnorm_final"] = res_final;
        entry["resnorm_max"] = res_max;
        summary.push_back(entry);
    }

    std::ofstream out(out_dir + "/summary.json");
    if (!out) throw IoError("cannot write \"" + out_dir + "/summary.json\"");
    out << summary.dump(2) << "\n";
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_plot(const std::vector<std::string>& log_paths, const std::string& out_dir) {
    if (log_paths.empty()) throw ConfigError("plot needs at least one --log");
    fs::create_directories(out_dir);

    std::vector<PlotSeries> loss_series, res_series, grad_series;
    for (const auto& lp : log_paths) {
        const auto records = read_metrics_log(lp);
        if (records.empty()) throw DegenerateInputError("metrics log \"" + lp + "\" is empty");
        const std::string stem = path_stem(lp) == "metrics" ? fs::path(lp).parent_path().filename().string()
                                                            : path_stem(lp);

        PlotSeries loss{stem, {}, {}};
        std::vector<double> raw;
        for (const auto& r : records) {
            loss.xs.push_back(double(r.step));
            raw.push_back(r.train_loss);
        }
        loss.ys = ema_smooth(raw, 0.9);  // logs hold raw values; smoothing is plot-only
        loss_series.push_back(std::move(loss));

        size_t k = 0;
        for (const auto& r : records) k = std::max(k, r.resnorm.size());
        for (size_t t = 0; t < k; ++t) {
            PlotSeries s{stem + " t=" + std::to_string(t + 1), {}, {}};
            for (const auto& r : records)
                if (t < r.resnorm.size()) {
                    s.xs.push_back(double(r.step));
                    s.ys.push_back(r.resnorm[t]);
                }
            res_series.push_back(std::move(s));
        }

        std::vector<std::string> block_names;
        for (const auto& r : records)
            for (const auto& [name, _] : r.block_grad_norms)
                if (std::find(block_names.begin(), block_names.end(), name) == block_names.end())
                    block_names.push_back(name);
        for (const auto& name : block_names) {
            PlotSeries s{stem + " " + name, {}, {}};
            for (const auto& r : records) {
                const auto it = r.block_grad_norms.find(name);
                if (it != r.block_grad_norms.end()) {
                    s.xs.push_back(double(r.step));
                    s.ys.push_back(it->second);
                }
            }
            grad_series.push_back(std::move(s));
        }
    }

    write_line_chart_svg(out_dir + "/loss.svg", "training loss (EMA 0.9)", "step", "loss (nats)",
                         loss_series);
    write_line_chart_svg(out_dir + "/resnorm.svg", "residual-state norm per loop index", "step",
                         "resnorm", res_series);
    write_line_chart_svg(out_dir + "/grad_norms.svg", "block gradient norms (pre-clip)", "step",
                         "L2 norm", grad_series);
    std::cout << "wrote " << out_dir << "/loss.svg, resnorm.svg, grad_norms.svg\n";
    return 0;
}

}  // namespace looplab
