#include "looplab/data_eval.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "looplab/errors.hpp"

namespace looplab {

using json = nlohmann::json;

double bpb(const std::vector<double>& per_token_losses, const std::vector<int64_t>& byte_counts,
           const std::vector<uint8_t>* valid) {
    if (per_token_losses.size() != byte_counts.size())
        throw DimensionError("bpb: losses and byte counts must align");
    double nats = 0.0;
    int64_t bytes = 0;
    for (size_t i = 0; i < per_token_losses.size(); ++i) {
        if (valid && !(*valid)[i]) continue;
        if (byte_counts[i] == 0) continue;  // special tokens leave both sums
        nats += per_token_losses[i];
        bytes += byte_counts[i];
    }
    if (bytes <= 0) throw DegenerateInputError("bpb: no bytes represented");
    return nats / (std::log(2.0) * double(bytes));
}

double perplexity(const std::vector<double>& per_token_losses,
                  const std::vector<uint8_t>* valid) {
    double nats = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < per_token_losses.size(); ++i) {
        if (valid && !(*valid)[i]) continue;
        nats += per_token_losses[i];
        ++n;
    }
    if (n == 0) throw DegenerateInputError("perplexity: no tokens");
    return std::exp(nats / double(n));
}

double centered_accuracy(double a, double a_rand) {
    if (a < 0.0 || a > 1.0) throw ContractError("centered_accuracy: a must be in [0,1]");
    if (a_rand <= 0.0 || a_rand >= 1.0)
        throw DegenerateInputError("centered_accuracy: a_rand must be in (0,1)");
    return (a - a_rand) / (1.0 - a_rand);
}

std::string task_kind_name(TaskKind k) {
    switch (k) {
        case TaskKind::multiple_choice: return "multiple_choice";
        case TaskKind::schema: return "schema";
        case TaskKind::language_modeling: return "language_modeling";
    }
    throw ContractError("unknown task kind");
}

TaskKind parse_task_kind(const std::string& s) {
    if (s == "multiple_choice") return TaskKind::multiple_choice;
    if (s == "schema") return TaskKind::schema;
    if (s == "language_modeling") return TaskKind::language_modeling;
    throw ConfigError("unknown task kind \"" + s + "\"");
}

void validate_task(const EvalTask& task) {
    if (task.a_rand <= 0.0 || task.a_rand >= 1.0)
        throw ConfigError("task \"" + task.name + "\": a_rand must be in (0,1)");
    if (task.few_shot < 0) throw ConfigError("task \"" + task.name + "\": few_shot must be >= 0");
    for (const auto& item : task.items) {
        switch (task.kind) {
            case TaskKind::multiple_choice:
                if (item.contexts.size() != 1 || item.candidates.size() < 2)
                    throw ConfigError("multiple_choice items need one context and >= 2 candidates");
                if (item.gold < 0 || item.gold >= int(item.candidates.size()))
                    throw ConfigError("gold index out of range");
                break;
            case TaskKind::schema:
                if (item.contexts.size() < 2 || item.candidates.size() != 1)
                    throw ConfigError("schema items need >= 2 contexts and one suffix");
                if (item.gold < 0 || item.gold >= int(item.contexts.size()))
                    throw ConfigError("gold index out of range");
                break;
            case TaskKind::language_modeling:
                if (item.contexts.size() != 1 || item.candidates.size() != 1)
                    throw ConfigError("language_modeling items need one context and one continuation");
                break;
        }
    }
}

EvalTask load_task(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open task file \"" + path + "\"");
    EvalTask task;
    std::string line;
    int64_t line_no = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const std::exception& e) {
            throw IoError("task file \"" + path + "\" line " + std::to_string(line_no) + ": " +
                          e.what());
        }
        if (!have_header) {
            task.name = j.at("name").get<std::string>();
            task.kind = parse_task_kind(j.at("kind").get<std::string>());
            task.a_rand = j.at("a_rand").get<double>();
            task.few_shot = j.value("few_shot", 0);
            have_header = true;
            continue;
        }
        EvalItem item;
        item.gold = j.value("gold", 0);
        switch (task.kind) {
            case TaskKind::multiple_choice:
                item.contexts = {j.at("context").get<std::string>()};
                item.candidates = j.at("candidates").get<std::vector<std::string>>();
                break;
            case TaskKind::schema:
                item.contexts = j.at("contexts").get<std::vector<std::string>>();
                item.candidates = {j.at("suffix").get<std::string>()};
                break;
            case TaskKind::language_modeling:
                item.contexts = {j.at("context").get<std::string>()};
                item.candidates = {j.at("continuation").get<std::string>()};
                break;
        }
        task.items.push_back(std::move(item));
    }
    if (!have_header) throw IoError("task file \"" + path + "\" has no header record");
    validate_task(task);
    return task;
}

void save_task(const EvalTask& task, const std::string& path) {
    validate_task(task);
    std::ofstream out(path);
    if (!out) throw IoError("cannot write task file \"" + path + "\"");
    json h;
    h["name"] = task.name;
    h["kind"] = task_kind_name(task.kind);
    h["a_rand"] = task.a_rand;
    h["few_shot"] = task.few_shot;
    out << h.dump() << '\n';
    for (const auto& item : task.items) {
        json j;
        j["gold"] = item.gold;
        switch (task.kind) {
            case TaskKind::multiple_choice:
                j["context"] = item.contexts[0];
                j["candidates"] = item.candidates;
                break;
            case TaskKind::schema:
                j["contexts"] = item.contexts;
                j["suffix"] = item.candidates[0];
                break;
            case TaskKind::language_modeling:
                j["context"] = item.contexts[0];
                j["continuation"] = item.candidates[0];
                break;
        }
        out << j.dump() << '\n';
    }
}

namespace {

std::string render_example(const EvalTask& task, const EvalItem& item) {
    switch (task.kind) {
        case TaskKind::multiple_choice:
            return item.contexts[0] + item.candidates[size_t(item.gold)];
        case TaskKind::schema:
            return item.contexts[size_t(item.gold)] + item.candidates[0];
        case TaskKind::language_modeling:
            return item.contexts[0] + item.candidates[0];
    }
    throw ContractError("unknown task kind");
}

}  // namespace

std::string few_shot_prompt(const EvalTask& task, size_t idx) {
    if (task.few_shot == 0) return "";
    Rng rng(1234 + uint64_t(idx));
    std::vector<size_t> pool;
    for (size_t i = 0; i < task.items.size(); ++i)
        if (i != idx) pool.push_back(i);
    const size_t take = std::min<size_t>(size_t(task.few_shot), pool.size());
    std::string prompt;
    for (size_t k = 0; k < take; ++k) {
        const size_t j = k + size_t(rng.below(uint64_t(pool.size() - k)));
        std::swap(pool[k], pool[j]);
        prompt += render_example(task, task.items[pool[k]]) + "\n\n";
    }
    return prompt;
}

namespace {

// mean model loss over the token positions [from, seq_len); losses[i]
// predicts token i+1
double mean_loss_over_tail(EvalModel& model, const std::vector<int32_t>& seq, size_t from) {
    if (from < 1 || from >= seq.size())
        throw DegenerateInputError("scoring needs at least one context token before the span");
    const auto losses = model.sequence_losses(seq);
    double acc = 0.0;
    for (size_t j = from; j < seq.size(); ++j) acc += losses[j - 1];
    return acc / double(seq.size() - from);
}

size_t common_token_prefix(const std::vector<std::vector<int32_t>>& seqs) {
    size_t common = seqs[0].size();
    for (const auto& s : seqs) common = std::min(common, s.size());
    for (size_t j = 0; j < common; ++j)
        for (size_t i = 1; i < seqs.size(); ++i)
            if (seqs[i][j] != seqs[0][j]) return j;
    return common;
}

}  // namespace

int score_multiple_choice(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task,
                          size_t idx) {
    const auto& item = task.items[idx];
    if (item.candidates.size() < 2)
        throw ContractError("score_multiple_choice: need at least two candidates");
    const std::string prefix = few_shot_prompt(task, idx) + item.contexts[0];

    std::vector<std::vector<int32_t>> seqs;
    for (const auto& cand : item.candidates) seqs.push_back(tok.encode(prefix + cand));
    const size_t common = common_token_prefix(seqs);

    int best = 0;
    double best_loss = 0.0;
    for (size_t c = 0; c < seqs.size(); ++c) {
        // identical candidates score over zero tokens; treat as +inf unless all tie
        const double loss = seqs[c].size() > common
                                ? mean_loss_over_tail(model, seqs[c], common)
                                : std::numeric_limits<double>::infinity();
        if (c == 0 || loss < best_loss) {
            best = int(c);
            best_loss = loss;
        }
    }
    return best;
}

int score_schema(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task, size_t idx) {
    const auto& item = task.items[idx];
    if (item.contexts.size() < 2)
        throw ContractError("score_schema: need at least two contexts");
    const std::string prompt = few_shot_prompt(task, idx);
    const size_t suffix_tokens = tok.encode(item.candidates[0]).size();
    if (suffix_tokens == 0) throw DegenerateInputError("score_schema: empty suffix");

    int best = 0;
    double best_loss = 0.0;
    for (size_t c = 0; c < item.contexts.size(); ++c) {
        const auto seq = tok.encode(prompt + item.contexts[c] + item.candidates[0]);
        const double loss = mean_loss_over_tail(model, seq, seq.size() - suffix_tokens);
        if (c == 0 || loss < best_loss) {
            best = int(c);
            best_loss = loss;
        }
    }
    return best;
}

bool score_language_modeling(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task,
                             size_t idx) {
    const auto& item = task.items[idx];
    const auto prompt = tok.encode(few_shot_prompt(task, idx) + item.contexts[0]);
    const auto target = tok.encode(item.candidates[0]);
    if (prompt.empty() || target.empty())
        throw DegenerateInputError("score_language_modeling: empty context or continuation");
    const auto got = model.greedy_continue(prompt, int(target.size()));
    return got == target;
}

double task_accuracy(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task) {
    validate_task(task);
    if (task.items.empty()) throw DegenerateInputError("task has no items");
    std::vector<size_t> order(task.items.size());
    std::iota(order.begin(), order.end(), size_t(0));
    Rng shuffle_rng(1337);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[size_t(shuffle_rng.below(uint64_t(i)))]);

    int64_t correct = 0;
    for (size_t idx : order) {
        switch (task.kind) {
            case TaskKind::multiple_choice:
                correct += score_multiple_choice(model, tok, task, idx) == task.items[idx].gold;
                break;
            case TaskKind::schema:
                correct += score_schema(model, tok, task, idx) == task.items[idx].gold;
                break;
            case TaskKind::language_modeling:
                correct += score_language_modeling(model, tok, task, idx);
                break;
        }
    }
    return double(correct) / double(task.items.size());
}

Corpus split_corpus(std::string bytes, double split_fraction, uint64_t seed) {
    if (split_fraction < 0.0 || split_fraction >= 1.0)
        throw ConfigError("split_fraction must be in [0, 1)");
    Corpus c;
    const size_t val_len = size_t(double(bytes.size()) * split_fraction);
    const size_t train_len = bytes.size() - val_len;
    c.val_bytes = bytes.substr(train_len);
    bytes.resize(train_len);
    c.train_bytes = std::move(bytes);
    c.stream_seed = seed;
    return c;
}

Corpus load_corpus(const std::string& path, double split_fraction, uint64_t seed) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus \"" + path + "\"");
    std::ostringstream ss;
    ss << in.rdbuf();
    return split_corpus(ss.str(), split_fraction, seed);
}

ByteWindowSampler::ByteWindowSampler(const std::string* bytes, int64_t window_len, uint64_t seed)
    : bytes_(bytes), window_len_(window_len), rng_(seed) {
    if (window_len_ < 2) throw ContractError("window length must be >= 2");
    if (int64_t(bytes_->size()) < window_len_)
        throw DegenerateInputError("corpus shorter than one window (" +
                                   std::to_string(bytes_->size()) + " < " +
                                   std::to_string(window_len_) + " bytes)");
}

TokenBatch ByteWindowSampler::next_batch(int64_t batch_size) {
    TokenBatch tb;
    tb.batch = batch_size;
    tb.time = window_len_;
    tb.ids.reserve(size_t(batch_size * window_len_));
    const uint64_t starts = uint64_t(int64_t(bytes_->size()) - window_len_ + 1);
    for (int64_t b = 0; b < batch_size; ++b) {
        const size_t off = size_t(rng_.below(starts));
        for (int64_t i = 0; i < window_len_; ++i)
            tb.ids.push_back(int32_t(uint8_t((*bytes_)[off + size_t(i)])));
    }
    return tb;
}

std::vector<std::vector<int32_t>> val_windows(const std::string& bytes, int64_t window_len) {
    std::vector<std::vector<int32_t>> out;
    for (size_t off = 0; off + size_t(window_len) <= bytes.size(); off += size_t(window_len)) {
        std::vector<int32_t> w(size_t(window_len), 0);
        for (int64_t i = 0; i < window_len; ++i) w[size_t(i)] = int32_t(uint8_t(bytes[off + size_t(i)]));
        out.push_back(std::move(w));
    }
    return out;
}

LmEvalResult evaluate_lm(EvalModel& model, const std::string& val_bytes, int64_t seq_len) {
    const auto windows = val_windows(val_bytes, seq_len + 1);
    if (windows.empty())
        throw DegenerateInputError("validation stream shorter than one window");
    double nats = 0.0;
    int64_t n = 0;
    for (const auto& w : windows) {
        const auto losses = model.sequence_losses(w);
        for (double l : losses) nats += l;
        n += int64_t(losses.size());
    }
    LmEvalResult r;
    r.tokens = n;
    r.bpb = nats / (std::log(2.0) * double(n));  // byte tokens represent one byte each
    r.ppl = std::exp(nats / double(n));
    return r;
}

}  // namespace looplab
