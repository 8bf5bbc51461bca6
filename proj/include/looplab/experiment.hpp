#pragma once

#include <string>
#include <vector>

#include "looplab/backbone.hpp"
#include "looplab/diagnostics.hpp"
#include "looplab/loop.hpp"

namespace looplab {

// One experiment: model sizing, loop wiring, optimization budget, data,
// diagnostics thresholds and evaluation schedule. Parsed from nested JSON;
// unknown keys are hard errors so hyperparameters cannot drift silently.
struct ExperimentConfig {
    // model
    int depth = 2;
    int64_t vocab_size_raw = 258;  // byte tokenizer: 256 bytes + bos + sep
    int64_t seq_len = 64;
    std::string attn_type = "full";
    int64_t h_kv = 0;  // 0 selects h_kv = n_q_heads
    int64_t mla_rank = 128;
    std::string window_pattern = "L";

    // loop
    int k_train = 6;
    std::string variant = "flt";

    // optimization
    int64_t batch_tokens = 8192;
    int64_t device_batch = 32;
    int64_t total_steps = 0;  // 0 = Chinchilla auto (20 tokens per parameter)
    uint64_t seed = 1;

    // data
    std::string corpus;
    double val_fraction = 0.05;

    // diagnostics
    CollapseCriteria criteria;
    std::vector<std::string> monitored_blocks;  // empty = library defaults
    int64_t checkpoint_every = 0;               // 0 = every 25% of total steps

    // eval
    std::vector<int> k_list = {1, 3, 6};
    std::vector<std::string> task_files;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::string& path);

// Validates everything that does not require touching the filesystem.
void validate_experiment(const ExperimentConfig& cfg);

BackboneConfig backbone_config(const ExperimentConfig& cfg);
LoopVariant experiment_variant(const ExperimentConfig& cfg);

}  // namespace looplab
