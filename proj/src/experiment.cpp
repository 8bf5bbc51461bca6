#include "looplab/experiment.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "looplab/errors.hpp"

namespace looplab {

using json = nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& section,
                    const std::set<std::string>& allowed) {
    if (!obj.is_object()) throw ConfigError("section \"" + section + "\" must be an object");
    for (const auto& [key, _] : obj.items())
        if (!allowed.count(key))
            throw ConfigError("unknown key \"" + (section.empty() ? key : section + "." + key) +
                              "\"");
}

template <class T>
void read_key(const json& obj, const char* key, T* out) {
    if (obj.contains(key)) *out = obj.at(key).get<T>();
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(j, "", {"model", "loop", "optimization", "data", "diagnostics", "eval"});

    ExperimentConfig c;
    if (j.contains("model")) {
        const auto& m = j.at("model");
        reject_unknown(m, "model",
                       {"depth", "vocab_size_raw", "seq_len", "attn_type", "h_kv", "mla_rank",
                        "window_pattern"});
        read_key(m, "depth", &c.depth);
        read_key(m, "vocab_size_raw", &c.vocab_size_raw);
        read_key(m, "seq_len", &c.seq_len);
        read_key(m, "attn_type", &c.attn_type);
        read_key(m, "h_kv", &c.h_kv);
        read_key(m, "mla_rank", &c.mla_rank);
        read_key(m, "window_pattern", &c.window_pattern);
    }
    if (j.contains("loop")) {
        const auto& l = j.at("loop");
        reject_unknown(l, "loop", {"k_train", "variant"});
        read_key(l, "k_train", &c.k_train);
        read_key(l, "variant", &c.variant);
    }
    if (j.contains("optimization")) {
        const auto& o = j.at("optimization");
        reject_unknown(o, "optimization", {"batch_tokens", "device_batch", "total_steps", "seed"});
        read_key(o, "batch_tokens", &c.batch_tokens);
        read_key(o, "device_batch", &c.device_batch);
        read_key(o, "total_steps", &c.total_steps);
        read_key(o, "seed", &c.seed);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        reject_unknown(d, "data", {"corpus", "val_fraction"});
        read_key(d, "corpus", &c.corpus);
        read_key(d, "val_fraction", &c.val_fraction);
    }
    if (j.contains("diagnostics")) {
        const auto& d = j.at("diagnostics");
        reject_unknown(d, "diagnostics",
                       {"window", "plateau_eps", "sigma_max", "loss_max_factor",
                        "plateau_floor_factor", "monitored_blocks", "checkpoint_every"});
        read_key(d, "window", &c.criteria.window);
        read_key(d, "plateau_eps", &c.criteria.plateau_eps);
        read_key(d, "sigma_max", &c.criteria.sigma_max);
        read_key(d, "loss_max_factor", &c.criteria.loss_max_factor);
        read_key(d, "plateau_floor_factor", &c.criteria.plateau_floor_factor);
        read_key(d, "monitored_blocks", &c.monitored_blocks);
        read_key(d, "checkpoint_every", &c.checkpoint_every);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        reject_unknown(e, "eval", {"k_list", "tasks"});
        read_key(e, "k_list", &c.k_list);
        read_key(e, "tasks", &c.task_files);
    }
    validate_experiment(c);
    return c;
}

std::string experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["model"] = {{"depth", c.depth},
                  {"vocab_size_raw", c.vocab_size_raw},
                  {"seq_len", c.seq_len},
                  {"attn_type", c.attn_type},
                  {"h_kv", c.h_kv},
                  {"mla_rank", c.mla_rank},
                  {"window_pattern", c.window_pattern}};
    j["loop"] = {{"k_train", c.k_train}, {"variant", c.variant}};
    j["optimization"] = {{"batch_tokens", c.batch_tokens},
                         {"device_batch", c.device_batch},
                         {"total_steps", c.total_steps},
                         {"seed", c.seed}};
    j["data"] = {{"corpus", c.corpus}, {"val_fraction", c.val_fraction}};
    j["diagnostics"] = {{"window", c.criteria.window},
                        {"plateau_eps", c.criteria.plateau_eps},
                        {"sigma_max", c.criteria.sigma_max},
                        {"loss_max_factor", c.criteria.loss_max_factor},
                        {"plateau_floor_factor", c.criteria.plateau_floor_factor},
                        {"monitored_blocks", c.monitored_blocks},
                        {"checkpoint_every", c.checkpoint_every}};
    j["eval"] = {{"k_list", c.k_list}, {"tasks", c.task_files}};
    return j.dump(2);
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config \"" + path + "\"");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_experiment_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(e.what()).substr(std::string("config error: ").size()) +
                          " (in \"" + path + "\")");
    }
}

void save_experiment_config(const ExperimentConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config \"" + path + "\"");
    out << experiment_config_to_json(cfg) << '\n';
}

void validate_experiment(const ExperimentConfig& c) {
    backbone_config(c);     // throws ConfigError on bad model keys
    parse_variant(c.variant);
    if (c.k_train < 1) throw ConfigError("loop.k_train must be >= 1");
    if (c.batch_tokens < 1) throw ConfigError("optimization.batch_tokens must be positive");
    if (c.device_batch < 1) throw ConfigError("optimization.device_batch must be positive");
    if (c.total_steps < 0) throw ConfigError("optimization.total_steps must be >= 0");
    if (c.val_fraction < 0.0 || c.val_fraction >= 1.0)
        throw ConfigError("data.val_fraction must be in [0, 1)");
    validate_criteria(c.criteria);
    if (c.checkpoint_every < 0) throw ConfigError("diagnostics.checkpoint_every must be >= 0");
    for (int k : c.k_list)
        if (k < 1) throw ConfigError("eval.k_list entries must be >= 1");
}

BackboneConfig backbone_config(const ExperimentConfig& c) {
    DeriveOptions opt;
    opt.seq_len = c.seq_len;
    opt.h_kv = c.h_kv;
    opt.attn_type = parse_attn_type(c.attn_type);
    opt.mla_rank = c.mla_rank;
    opt.window_pattern = c.window_pattern;
    return derive_dims(c.depth, c.vocab_size_raw, opt);
}

LoopVariant experiment_variant(const ExperimentConfig& c) { return parse_variant(c.variant); }

}  // namespace looplab
