// SPDX-License-Identifier: Apache-2.0
#include "eoe/experts.hpp"

#include <cmath>
#include <iostream>
#include <string>

namespace eoe {

std::vector<TensorRef> ExpertView::all() const {
    std::vector<TensorRef> refs;
    refs.reserve(shared.size() + partition.size());
    refs.insert(refs.end(), shared.begin(), shared.end());
    refs.insert(refs.end(), partition.begin(), partition.end());
    return refs;
}

ExpertView expert_view(ParamStore<float>& params, std::size_t expert_id) {
    const ModelConfig& cfg = params.config;
    if (expert_id >= cfg.n_experts) {
        throw UsageError("expert id " + std::to_string(expert_id) + " out of range for " +
                         std::to_string(cfg.n_experts) + " experts");
    }
    const std::size_t lpe = cfg.layers_per_expert();
    ExpertView view;
    view.expert_id = expert_id;
    view.block_begin = expert_id * lpe;
    view.block_end = view.block_begin + lpe;
    visit_input(params.input, [&](std::string_view n, Tensor& t) { view.shared.push_back({std::string(n), &t}); });
    visit_output(params.output, [&](std::string_view n, Tensor& t) { view.shared.push_back({std::string(n), &t}); });
    for (std::size_t b = view.block_begin; b < view.block_end; ++b) {
        visit_block(params.blocks[b],
                    [&](std::string_view n, Tensor& t) { view.partition.push_back({block_tensor_name(b, n), &t}); });
    }
    return view;
}

std::vector<ExpertView> make_experts(const ModelConfig& config, ParamStore<float>& params) {
    config.validate();
    if (params.config != config || params.blocks.size() != config.n_layers_total ||
        params.output.head.has_value() == config.tie_head) {
        throw UsageError("parameter store does not match the model config");
    }
    std::vector<ExpertView> views;
    views.reserve(config.n_experts);
    for (std::size_t e = 0; e < config.n_experts; ++e) {
        views.push_back(expert_view(params, e));
    }
    return views;
}

std::vector<const Tensor*> BestExpertSnapshot::tensors() const {
    std::vector<const Tensor*> out;
    for (const auto& block : partition_copy) {
        visit_block(block, [&](std::string_view, const Tensor& t) { out.push_back(&t); });
    }
    return out;
}

SnapshotPtr maybe_update_best(SnapshotPtr best, const ExpertView& expert, double batch_loss, std::size_t step) {
    if (!std::isfinite(batch_loss)) {
        std::cerr << "warning: non-finite loss at step " << step << " from expert " << expert.expert_id
                  << " ignored for best-expert tracking\n";
        return best;
    }
    if (best && !(batch_loss < best->loss)) {
        return best;
    }
    auto snap = std::make_shared<BestExpertSnapshot>();
    snap->source_expert_id = expert.expert_id;
    snap->loss = batch_loss;
    snap->step_taken = step;
    snap->partition_copy.resize(expert.block_end - expert.block_begin);
    std::size_t next = 0;
    for (auto& block : snap->partition_copy) {
        visit_block(block, [&](std::string_view, Tensor& t) { t = *expert.partition.at(next++).tensor; });
    }
    return snap;
}

ParamStore<float> materialize_best(const ParamStore<float>& params, const BestExpertSnapshot& best) {
    ParamStore<float> out;
    out.config = params.config;
    out.config.n_layers_total = params.config.layers_per_expert();
    out.config.n_experts = 1;
    if (best.partition_copy.size() != out.config.n_layers_total) {
        throw UsageError("snapshot depth does not match the model's layers per expert");
    }
    out.input = params.input;
    out.blocks = best.partition_copy;
    out.output = params.output;
    return out;
}

}  // namespace eoe
