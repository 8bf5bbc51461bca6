#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "looplab/cli.hpp"
#include "looplab/errors.hpp"

int main(int argc, char** argv) {
    CLI::App app{"looplab: a desk-scale laboratory for looped language models"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_dir = "run", k_list_csv;
    std::vector<std::string> config_paths, log_paths;
    int64_t steps = 0;
    std::optional<uint64_t> seed;

    auto* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--config", config_path, "experiment config (JSON)")->required();
    train->add_option("--out", out_dir, "output directory (metrics, checkpoints)");
    train->add_option("--seed", seed, "override the config seed");
    train->add_option("--steps", steps, "override the step budget");

    auto* eval = app.add_subcommand("eval", "budget-evaluate a checkpoint over a K list");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--config", config_path, "experiment config (JSON)")->required();
    eval->add_option("--out", out_dir, "output directory for eval curves");
    eval->add_option("--k-list", k_list_csv, "comma-separated loop counts, e.g. 1,3,6");

    auto* diagnose = app.add_subcommand("diagnose", "run bounded diagnostic windows and compare");
    diagnose->add_option("--config", config_paths, "experiment config (repeatable)")->required();
    diagnose->add_option("--steps", steps, "diagnostic window length (default 2000)");
    diagnose->add_option("--out", out_dir, "output directory");

    auto* plot = app.add_subcommand("plot", "render metric logs as SVG charts");
    plot->add_option("--log", log_paths, "metrics log (repeatable)")->required();
    plot->add_option("--out", out_dir, "output directory for SVG files");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return looplab::cmd_train(config_path, out_dir, seed, steps);
        if (*eval) return looplab::cmd_eval(checkpoint_path, config_path, out_dir, k_list_csv);
        if (*diagnose)
            return looplab::cmd_diagnose(config_paths, steps > 0 ? steps : 2000, out_dir);
        if (*plot) return looplab::cmd_plot(log_paths, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "looplab: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
