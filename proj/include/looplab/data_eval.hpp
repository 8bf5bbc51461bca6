#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "looplab/loop.hpp"
#include "looplab/rng.hpp"
#include "looplab/tensor.hpp"

namespace looplab {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0..255 are raw bytes, followed by special tokens
// that represent zero bytes. encode/decode is the identity on byte strings.
// ---------------------------------------------------------------------------
class ByteTokenizer {
  public:
    static constexpr int32_t kByteCount = 256;
    static constexpr int32_t kBos = 256;
    static constexpr int32_t kSep = 257;

    int64_t vocab_raw() const { return 258; }
    int64_t byte_count(int32_t id) const { return id >= 0 && id < kByteCount ? 1 : 0; }

    std::vector<int32_t> encode(const std::string& text) const {
        std::vector<int32_t> out;
        out.reserve(text.size());
        for (unsigned char c : text) out.push_back(int32_t(c));
        return out;
    }

    std::string decode(const std::vector<int32_t>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (int32_t id : ids)
            if (id >= 0 && id < kByteCount) out.push_back(char(uint8_t(id)));
        return out;
    }
};

// ---------------------------------------------------------------------------
// Metric formulas
// ---------------------------------------------------------------------------

// bits per byte: sum(losses in nats) / (ln2 * sum(bytes)), with zero-byte
// (special) and masked positions excluded from both sums.
double bpb(const std::vector<double>& per_token_losses, const std::vector<int64_t>& byte_counts,
           const std::vector<uint8_t>* valid = nullptr);

// exp(mean nats) over non-masked tokens
double perplexity(const std::vector<double>& per_token_losses,
                  const std::vector<uint8_t>* valid = nullptr);

// (a - a_rand) / (1 - a_rand)
double centered_accuracy(double a, double a_rand);

// ---------------------------------------------------------------------------
// Synthetic CORE-style tasks
// ---------------------------------------------------------------------------
enum class TaskKind { multiple_choice, schema, language_modeling };

std::string task_kind_name(TaskKind k);
TaskKind parse_task_kind(const std::string& s);

struct EvalItem {
    // multiple_choice: contexts = {context}, candidates = the choices
    // schema: contexts = the choices, candidates = {shared suffix}
    // language_modeling: contexts = {context}, candidates = {continuation}
    std::vector<std::string> contexts;
    std::vector<std::string> candidates;
    int gold = 0;
};

struct EvalTask {
    std::string name;
    TaskKind kind = TaskKind::multiple_choice;
    double a_rand = 0.5;
    int few_shot = 0;
    std::vector<EvalItem> items;
};

void validate_task(const EvalTask& task);
EvalTask load_task(const std::string& path);
void save_task(const EvalTask& task, const std::string& path);

// Scoring is generic over any model that can produce per-position losses and
// greedy continuations, so tests can drive it with hand-built probabilities.
struct EvalModel {
    virtual ~EvalModel() = default;
    // losses[i] is the loss of predicting tokens[i+1] at position i
    virtual std::vector<double> sequence_losses(const std::vector<int32_t>& tokens) = 0;
    virtual std::vector<int32_t> greedy_continue(const std::vector<int32_t>& prompt,
                                                 int n_new) = 0;
};

// Few-shot examples for item `idx` are drawn without replacement from the
// other items with a per-example seed of 1234 + idx.
std::string few_shot_prompt(const EvalTask& task, size_t idx);

// argmin of mean loss over the candidate-only tokens; ties break to the
// lowest index
int score_multiple_choice(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task,
                          size_t idx);

// argmin of mean loss over the shared suffix tokens, across contexts
int score_schema(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task, size_t idx);

// correct iff greedy decoding reproduces the continuation exactly
bool score_language_modeling(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task,
                             size_t idx);

// accuracy over all items (dataset order shuffled with seed 1337)
double task_accuracy(EvalModel& model, const ByteTokenizer& tok, const EvalTask& task);

// ---------------------------------------------------------------------------
// Corpus handling: raw bytes, deterministic tail split, fixed-length windows
// of seq_len + 1 tokens (input and target shifted by one).
// ---------------------------------------------------------------------------
struct Corpus {
    std::string train_bytes;
    std::string val_bytes;
    uint64_t stream_seed = 0;
};

Corpus load_corpus(const std::string& path, double split_fraction, uint64_t seed);
Corpus split_corpus(std::string bytes, double split_fraction, uint64_t seed);

class ByteWindowSampler {
  public:
    ByteWindowSampler(const std::string* bytes, int64_t window_len, uint64_t seed);
    TokenBatch next_batch(int64_t batch_size);

  private:
    const std::string* bytes_;
    int64_t window_len_;
    Rng rng_;
};

// sequential non-overlapping windows; the tail shorter than window_len is dropped
std::vector<std::vector<int32_t>> val_windows(const std::string& bytes, int64_t window_len);

struct LmEvalResult {
    double bpb = 0.0;
    double ppl = 0.0;
    int64_t tokens = 0;
};

LmEvalResult evaluate_lm(EvalModel& model, const std::string& val_bytes, int64_t seq_len);

// ---------------------------------------------------------------------------
// Budget evaluation: one checkpoint evaluated at several loop counts.
// ---------------------------------------------------------------------------
struct BudgetCurve {
    std::string metric;
    std::vector<std::pair<int, double>> points;  // (K, value), K strictly increasing
};

template <class Real>
class LoopedEvalModel : public EvalModel {
  public:
    LoopedEvalModel(const ModelWeights<Real>& w, int k_loops, LoopVariant variant)
        : w_(&w), k_(k_loops), variant_(variant) {
        if (k_loops < 1) throw ContractError("LoopedEvalModel: K must be >= 1");
    }

    std::vector<double> sequence_losses(const std::vector<int32_t>& tokens) override {
        if (tokens.size() < 2)
            throw ContractError("sequence_losses: need at least two tokens");
        Graph<Real> g(false);
        TokenBatch tb{tokens, 1, int64_t(tokens.size())};
        auto out = loop_forward(g, *w_, tb, k_, variant_);
        auto sl = last_step_loss(g, out.logits, tb);
        std::vector<double> losses(sl.per_token.begin(), sl.per_token.end() - 1);
        return losses;
    }

    std::vector<int32_t> greedy_continue(const std::vector<int32_t>& prompt, int n_new) override {
        return incremental_decode(*w_, prompt, k_, variant_, n_new);
    }

  private:
    const ModelWeights<Real>* w_;
    int k_;
    LoopVariant variant_;
};

inline std::vector<int> normalize_k_list(std::vector<int> k_list) {
    if (k_list.empty()) throw ContractError("budget_eval: K list must be nonempty");
    for (int k : k_list)
        if (k <= 0) throw ContractError("budget_eval: K must be positive");
    std::sort(k_list.begin(), k_list.end());
    k_list.erase(std::unique(k_list.begin(), k_list.end()), k_list.end());
    return k_list;
}

// Evaluates BPB, PPL and the mean centered accuracy at each K without
// reloading weights. The curve at K equal to the training loop count is
// bitwise identical to the standard evaluator (it is the same code path).
template <class Real>
std::vector<BudgetCurve> budget_eval(const ModelWeights<Real>& w, const std::string& val_bytes,
                                     const std::vector<EvalTask>& tasks, std::vector<int> k_list,
                                     LoopVariant variant, int64_t seq_len) {
    k_list = normalize_k_list(std::move(k_list));
    ByteTokenizer tok;
    BudgetCurve bpb_curve{"val_bpb", {}}, ppl_curve{"val_ppl", {}}, core_curve{"core", {}};
    for (int k : k_list) {
        LoopedEvalModel<Real> model(w, k, variant);
        const auto lm = evaluate_lm(model, val_bytes, seq_len);
        bpb_curve.points.push_back({k, lm.bpb});
        ppl_curve.points.push_back({k, lm.ppl});
        if (!tasks.empty()) {
            double acc = 0.0;
            for (const auto& t : tasks)
                acc += centered_accuracy(task_accuracy(model, tok, t), t.a_rand);
            core_curve.points.push_back({k, acc / double(tasks.size())});
        }
    }
    std::vector<BudgetCurve> curves = {bpb_curve, ppl_curve};
    if (!tasks.empty()) curves.push_back(core_curve);
    return curves;
}

}  // namespace looplab
