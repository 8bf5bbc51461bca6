#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "looplab/checkpoint.hpp"
#include "looplab/data_eval.hpp"
#include "looplab/diagnostics.hpp"
#include "looplab/experiment.hpp"
#include "looplab/loop.hpp"
#include "looplab/metrics_log.hpp"
#include "looplab/optim.hpp"

namespace looplab {

struct TrainPaths {
    std::string metrics_path;    // line-delimited metrics log
    std::string checkpoint_dir;  // checkpoints land here; empty disables them
};

struct TrainOutcome {
    CollapseStatus status = CollapseStatus::healthy;
    double final_loss = 0.0;
    int64_t steps_run = 0;
    bool has_val_bpb = false;
    double val_bpb = 0.0;
};

template <class Real>
OptimizerCheckpoint<Real> collect_optimizer_state(const ModelWeights<Real>& w,
                                                  const MuonOptimizer<Real>& muon,
                                                  AdamWOptimizer<Real>& adamw, int64_t step) {
    OptimizerCheckpoint<Real> oc;
    oc.step = step;
    size_t mi = 0;
    for (const auto& np : w.named_params()) {
        if (np.cls == ParamClass::muon_block) {
            oc.buffers.emplace_back("muon." + np.name + ".momentum", np.tensor->shape,
                                    muon.buffers()[mi]);
            ++mi;
        }
    }
    for (auto& slot : adamw.slots()) {
        const std::string base = slot.param == w.wte ? "adamw.wte" : "adamw.lm_head";
        oc.buffers.emplace_back(base + ".m", slot.param->shape, slot.m);
        oc.buffers.emplace_back(base + ".v", slot.param->shape, slot.v);
    }
    return oc;
}

// Runs the full training loop: micro-steps with gradient accumulation,
// block-gradient diagnostics recorded before clipping, global clipping, the
// Muon + AdamW step under a shared trapezoidal factor, per-step metrics, and
// checkpoints. step_override > 0 trims the schedule to a diagnostic window
// (the schedule still decays relative to the trimmed length).
template <class Real>
TrainOutcome train_model(const ExperimentConfig& xc, const TrainPaths& paths,
                         std::ostream& progress, int64_t step_override = 0,
                         bool final_val = true) {
    validate_experiment(xc);
    if (xc.corpus.empty()) throw ConfigError("data.corpus is required for training");
    const auto cfg = backbone_config(xc);
    const auto variant = experiment_variant(xc);

    auto corpus = load_corpus(xc.corpus, xc.val_fraction, xc.seed + 1);
    ByteWindowSampler sampler(&corpus.train_bytes, cfg.seq_len + 1, corpus.stream_seed);

    auto weights = init_weights<Real>(cfg, xc.seed);
    auto routing = route_params(weights);
    MuonOptimizer<Real> muon(routing.muon_params);
    AdamWOptimizer<Real> adamw(routing.adamw_params, cfg.d_model);

    const auto counts = count_params(cfg);
    const auto budget =
        token_budget(counts.excl_embedding, xc.batch_tokens, xc.device_batch, cfg.seq_len);
    int64_t total_steps = xc.total_steps > 0 ? xc.total_steps : budget.total_steps;
    if (step_override > 0) total_steps = step_override;
    const int64_t micro_steps = budget.micro_steps;
    const int64_t ckpt_every =
        xc.checkpoint_every > 0 ? xc.checkpoint_every : std::max<int64_t>(1, total_steps / 4);

    auto blocks = xc.monitored_blocks.empty() ? default_monitored_blocks(cfg.n_layers)
                                              : xc.monitored_blocks;
    {
        const auto known = named_blocks(weights);
        for (const auto& b : blocks)
            if (!known.count(b)) throw LookupError("monitored block \"" + b + "\" does not exist");
    }

    if (!paths.checkpoint_dir.empty())
        std::filesystem::create_directories(paths.checkpoint_dir);
    MetricsSink sink(paths.metrics_path);

    progress << "params total " << counts.total << " (excl embedding " << counts.excl_embedding
             << "), steps " << total_steps << ", micro-steps " << micro_steps << ", tokens/step "
             << micro_steps * xc.device_batch * cfg.seq_len << "\n";
    progress.flush();

    const auto t_start = std::chrono::steady_clock::now();
    std::vector<double> history;
    TrainOutcome outcome;
    int64_t tokens_seen = 0;
    std::vector<double> last_resnorm;
    const int64_t report_every = std::max<int64_t>(1, total_steps / 20);

    for (int64_t step = 0; step < total_steps; ++step) {
        for (auto& p : routing.all_params) p->zero_grad();

        double loss_acc = 0.0;
        for (int64_t m = 0; m < micro_steps; ++m) {
            auto tb = sampler.next_batch(xc.device_batch);
            Graph<Real> g;
            auto out = loop_forward(g, weights, tb, xc.k_train, variant);
            auto sl = last_step_loss(g, out.logits, tb);
            // accumulated gradients average over micro-steps
            auto scaled = scale(g, sl.loss, static_cast<Real>(1.0 / double(micro_steps)));
            g.backward(scaled);
            loss_acc += double(sl.loss->v[0]);
            if (m + 1 == micro_steps) last_resnorm = residual_norms(out.trace);
        }
        const double train_loss = loss_acc / double(micro_steps);

        MetricsRecord rec;
        rec.step = step;
        rec.train_loss = train_loss;
        rec.resnorm = last_resnorm;
        // block norms are read strictly before clipping mutates gradients
        for (const auto& b : blocks) rec.block_grad_norms[b] = block_grad_norm(weights, b);

        double lr_factor = 0.0;
        try {
            rec.pre_clip_grad_norm = clip_global_norm(routing.all_params, 1.0);
            lr_factor = trapezoid_lr(step, total_steps);
            muon.step(step, lr_factor);
            adamw.step(step, lr_factor);
        } catch (const TrainingFault& e) {
            rec.lr_factor = lr_factor;
            rec.pre_clip_grad_norm = std::numeric_limits<double>::quiet_NaN();
            rec.tokens_seen = tokens_seen;
            sink.emit(rec);
            progress << "step " << step << ": " << e.what() << "\n";
            outcome.status = CollapseStatus::diverged;
            outcome.final_loss = train_loss;
            outcome.steps_run = step + 1;
            return outcome;
        }
        rec.lr_factor = lr_factor;
        tokens_seen += micro_steps * xc.device_batch * cfg.seq_len;
        rec.tokens_seen = tokens_seen;
        sink.emit(rec);

        history.push_back(train_loss);
        outcome.status = detect_collapse(history, xc.criteria);
        outcome.final_loss = train_loss;
        outcome.steps_run = step + 1;

        if (step % report_every == 0 || step + 1 == total_steps) {
            const double secs =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
            progress << "step " << step << "/" << total_steps << "  loss " << train_loss
                     << "  lr " << lr_factor << "  grad " << rec.pre_clip_grad_norm << "  ["
                     << collapse_status_name(outcome.status) << "]  " << secs << "s\n";
            progress.flush();
        }

        if (outcome.status == CollapseStatus::diverged) {
            progress << "training diverged at step " << step << "\n";
            return outcome;
        }

        if (!paths.checkpoint_dir.empty() && (step + 1) % ckpt_every == 0 &&
            step + 1 != total_steps) {
            const auto oc = collect_optimizer_state(weights, muon, adamw, step + 1);
            save_checkpoint(paths.checkpoint_dir + "/ckpt_step" + std::to_string(step + 1) +
                                ".bin",
                            weights, &oc);
        }
    }

    // end-of-training validation and final checkpoint; the closing metrics
    // record sits one step past the last optimizer step and carries val_bpb
    if (final_val && int64_t(corpus.val_bytes.size()) >= cfg.seq_len + 1) {
        LoopedEvalModel<Real> eval_model(weights, xc.k_train, variant);
        const auto lm = evaluate_lm(eval_model, corpus.val_bytes, cfg.seq_len);
        outcome.has_val_bpb = true;
        outcome.val_bpb = lm.bpb;
        MetricsRecord rec;
        rec.step = total_steps;
        rec.train_loss = outcome.final_loss;
        rec.lr_factor = 0.0;
        rec.pre_clip_grad_norm = 0.0;
        rec.resnorm = last_resnorm;
        rec.tokens_seen = tokens_seen;
        rec.has_val_bpb = true;
        rec.val_bpb = lm.bpb;
        sink.emit(rec);
        progress << "final val bpb " << lm.bpb << " over " << lm.tokens << " tokens\n";
    }
    if (!paths.checkpoint_dir.empty()) {
        const auto oc = collect_optimizer_state(weights, muon, adamw, total_steps);
        save_checkpoint(paths.checkpoint_dir + "/ckpt_final.bin", weights, &oc);
    }
    return outcome;
}

}  // namespace looplab
