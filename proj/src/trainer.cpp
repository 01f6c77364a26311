// SPDX-License-Identifier: Apache-2.0
#include "eoe/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>

#include "eoe/checkpoint.hpp"

namespace eoe {

void TrainConfig::validate(const ModelConfig& model) const {
    auto fail = [](const std::string& msg) { throw UsageError("invalid train config: " + msg); };
    if (batches_per_expert == 0 || batch_size == 0 || seq_len == 0 || eval_batches == 0) {
        fail("batches_per_expert, batch_size, seq_len and eval_batches must be positive");
    }
    if (seq_len > model.ctx_len) {
        fail("seq_len " + std::to_string(seq_len) + " exceeds ctx_len " + std::to_string(model.ctx_len));
    }
    adamw.validate();
    evo.validate();
}

std::string format_metrics_row(const MetricsRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%zu,%zu,%.6g,%.6g,%.6g,%.6g,%zu,%zu", r.step, r.expert_id, r.train_loss,
                  r.best_loss, r.lr, r.tokens_per_sec, r.copied, r.mutated);
    return buf;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
    if (!out_) {
        throw IoError("cannot open metrics file " + path.string());
    }
    out_ << kMetricsHeader << '\n';
    out_.flush();
}

void MetricsWriter::append(const MetricsRecord& record) {
    out_ << format_metrics_row(record) << '\n';
    out_.flush();
    if (!out_) {
        throw IoError("failed writing metrics file " + path_.string());
    }
}

std::size_t expert_for_step(std::size_t step, std::size_t batches_per_expert, std::size_t n_experts) noexcept {
    return (step / batches_per_expert) % n_experts;
}

double evaluate(const ParamStore<float>& params, std::size_t expert_id, const TokenShard& shard,
                std::size_t n_batches, std::size_t batch, std::size_t seq_len, Rng& rng) {
    if (n_batches == 0) {
        throw UsageError("evaluate needs at least one batch");
    }
    const std::vector<TokenBatch> batches = sample_eval_batches(shard, n_batches, batch, seq_len, rng);
    double total = 0.0;
    for (const TokenBatch& b : batches) {
        const ActivationTape<float> tape = forward(params, expert_id, b);
        total += loss(tape.logits, b);
    }
    return total / static_cast<double>(batches.size());
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& cfg, const TokenShard& train_shard,
                  const TokenShard* val_shard, const StepObserver& observer) {
    model_config.validate();
    cfg.validate(model_config);
    if (train_shard.vocab_size > model_config.vocab_size) {
        throw UsageError("training shard vocabulary (" + std::to_string(train_shard.vocab_size) +
                         ") exceeds the model's (" + std::to_string(model_config.vocab_size) + ")");
    }

    Rng init_rng = Rng::for_stream(cfg.seed, streams::kInit);
    Rng data_rng = Rng::for_stream(cfg.seed, streams::kData);
    Rng evo_rng = Rng::for_stream(cfg.seed, streams::kEvo);
    std::vector<Rng> expert_data_rngs;
    if (cfg.disjoint_streams) {
        for (std::size_t e = 0; e < model_config.n_experts; ++e) {
            expert_data_rngs.push_back(Rng::for_stream(cfg.seed, streams::kExpertDataBase + e));
        }
    }
    SequentialSampler sequential;

    TrainResult result{init_params<float>(model_config, init_rng), nullptr, AdamWState{}, {}, {}};
    std::vector<ExpertView> experts = make_experts(model_config, result.params);

    std::optional<MetricsWriter> metrics;
    if (!cfg.metrics_path.empty()) {
        metrics.emplace(cfg.metrics_path);
    }
    const bool deterministic = deterministic_mode();

    for (std::size_t step = 0; step < cfg.total_steps; ++step) {
        const auto started = std::chrono::steady_clock::now();
        const std::size_t expert_id = expert_for_step(step, cfg.batches_per_expert, model_config.n_experts);
        const ExpertView& expert = experts[expert_id];

        TokenBatch batch;
        if (cfg.sampling == SamplingMode::sequential) {
            batch = sequential.next(train_shard, cfg.batch_size, cfg.seq_len);
        } else {
            Rng& rng = cfg.disjoint_streams ? expert_data_rngs[expert_id] : data_rng;
            batch = sample_batch(train_shard, cfg.batch_size, cfg.seq_len, rng);
        }

        const ActivationTape<float> tape = forward(result.params, expert_id, batch);
        const double batch_loss = loss(tape.logits, batch);
        if (!std::isfinite(batch_loss)) {
            throw NumericError("non-finite loss at step " + std::to_string(step) + " (expert " +
                               std::to_string(expert_id) + "); training aborted");
        }
        const GradStore<float> grads = backward(result.params, expert_id, tape, batch);
        const double lr = lr_at(cfg.adamw, step + 1, cfg.total_steps);
        adamw_step(expert, grads, result.optimizer, cfg.adamw, lr);

        result.best = maybe_update_best(result.best, expert, batch_loss, step);
        const EvoReport report =
            apply_evolution(expert, result.best.get(), result.optimizer, cfg.adamw.beta2, cfg.evo, evo_rng);

        MetricsRecord record;
        record.step = step;
        record.expert_id = expert_id;
        record.train_loss = batch_loss;
        record.best_loss = result.best->loss;
        record.lr = lr;
        record.copied = report.copied;
        record.mutated = report.mutated;
        if (!deterministic) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
            record.tokens_per_sec = secs > 0.0 ? static_cast<double>(batch.positions()) / secs : 0.0;
        }
        if (metrics) {
            metrics->append(record);
        }
        result.metrics.push_back(record);

        if (val_shard != nullptr && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Rng eval_rng = Rng::for_stream(cfg.seed, streams::kEval);
            const ParamStore<float> standalone = materialize_best(result.params, *result.best);
            result.evals.push_back({step, result.best->source_expert_id,
                                    evaluate(standalone, 0, *val_shard, cfg.eval_batches, cfg.batch_size,
                                             cfg.seq_len, eval_rng)});
        }

        if (observer) {
            observer(StepEvent{step, expert_id, result.params, result.best.get(), result.optimizer, record});
        }
    }

    if (!cfg.checkpoint_path.empty() && result.best) {
        save_best_checkpoint(result.params, *result.best, model_config, cfg.checkpoint_path);
    }
    return result;
}

}  // namespace eoe
