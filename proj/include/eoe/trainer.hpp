// SPDX-License-Identifier: Apache-2.0
//
// The training loop. Step k trains expert (k / batches_per_expert) mod
// n_experts: sample a batch, forward and backward through that expert only,
// AdamW on its tensors, record it as best if its batch loss beats the
// incumbent, then pull its partition toward the best snapshot.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "eoe/data.hpp"
#include "eoe/evo.hpp"
#include "eoe/experts.hpp"
#include "eoe/model.hpp"
#include "eoe/optim.hpp"

namespace eoe {

enum class SamplingMode { random, sequential };

// Sub-stream ids used with Rng::for_stream(seed, id). Expert e draws data
// from kExpertDataStreamBase + e when disjoint streams are enabled.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kData = 2;
inline constexpr std::uint64_t kEvo = 3;
inline constexpr std::uint64_t kEval = 4;
inline constexpr std::uint64_t kExpertDataBase = 16;
}  // namespace streams

struct TrainConfig {
    std::size_t total_steps = 1000;
    std::size_t batches_per_expert = 32;
    std::size_t batch_size = 4;
    std::size_t seq_len = 64;
    std::size_t eval_every = 100;
    std::size_t eval_batches = 4;
    std::uint64_t seed = 1337;
    AdamWConfig adamw;
    EvoConfig evo;
    SamplingMode sampling = SamplingMode::random;
    bool disjoint_streams = false;
    std::filesystem::path checkpoint_path;  // empty: no checkpoint
    std::filesystem::path metrics_path;     // empty: no CSV

    void validate(const ModelConfig& model) const;
};

struct MetricsRecord {
    std::size_t step = 0;
    std::size_t expert_id = 0;
    double train_loss = 0.0;
    double best_loss = 0.0;
    double lr = 0.0;
    double tokens_per_sec = 0.0;  // 0 in deterministic mode
    std::size_t copied = 0;
    std::size_t mutated = 0;
};

struct EvalRecord {
    std::size_t step = 0;
    std::size_t source_expert_id = 0;
    double loss = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "step,expert,loss,best_loss,lr,tokens_per_sec,copied,mutated";

// One CSV row (no newline); floats use 6 significant digits.
std::string format_metrics_row(const MetricsRecord& record);

// Append-only metrics CSV, flushed after every row.
class MetricsWriter {
public:
    explicit MetricsWriter(const std::filesystem::path& path);
    void append(const MetricsRecord& record);

private:
    std::ofstream out_;
    std::filesystem::path path_;
};

struct StepEvent {
    std::size_t step;
    std::size_t expert_id;
    const ParamStore<float>& params;
    const BestExpertSnapshot* best;
    const AdamWState& optimizer;
    const MetricsRecord& record;
};

using StepObserver = std::function<void(const StepEvent&)>;

struct TrainResult {
    ParamStore<float> params;
    SnapshotPtr best;
    AdamWState optimizer;
    std::vector<MetricsRecord> metrics;
    std::vector<EvalRecord> evals;
};

std::size_t expert_for_step(std::size_t step, std::size_t batches_per_expert, std::size_t n_experts) noexcept;

// Runs the full loop. Evaluations of the best snapshot on `val` happen every
// eval_every steps when a validation shard is given. Throws NumericError on a
// non-finite loss and IoError when the metrics or checkpoint file cannot be
// written.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config, const TokenShard& train_shard,
                  const TokenShard* val_shard = nullptr, const StepObserver& observer = {});

// Mean loss over n_batches batches of distinct random windows, evaluated
// through expert `expert_id`.
double evaluate(const ParamStore<float>& params, std::size_t expert_id, const TokenShard& shard,
                std::size_t n_batches, std::size_t batch, std::size_t seq_len, Rng& rng);

}  // namespace eoe
