// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <vector>

#include "eoe/model.hpp"

namespace eoe {

using TensorRef = NamedRef<Tensor>;

// One expert's parameters as references into a ParamStore: the shared input
// and output tensors plus the blocks in [block_begin, block_end). A view must
// not outlive the store it points into.
struct ExpertView {
    std::size_t expert_id = 0;
    std::size_t block_begin = 0;
    std::size_t block_end = 0;
    std::vector<TensorRef> shared;     // wte, wpe, lnf.g, lnf.b, (head)
    std::vector<TensorRef> partition;  // canonical block order

    // shared followed by partition
    std::vector<TensorRef> all() const;
};

ExpertView expert_view(ParamStore<float>& params, std::size_t expert_id);

// Contiguous, disjoint views covering every block, in ascending order.
std::vector<ExpertView> make_experts(const ModelConfig& config, ParamStore<float>& params);

// Frozen copy of the best partition seen so far. Immutable once built.
struct BestExpertSnapshot {
    std::size_t source_expert_id = 0;
    double loss = 0.0;
    std::size_t step_taken = 0;
    std::vector<BlockParams<float>> partition_copy;

    // Tensors of partition_copy in the same order as ExpertView::partition.
    std::vector<const Tensor*> tensors() const;
};

using SnapshotPtr = std::shared_ptr<const BestExpertSnapshot>;

// Returns a fresh snapshot of `expert` when there is no incumbent or
// batch_loss is strictly lower than it; otherwise returns `best` unchanged.
// A non-finite loss is rejected with a warning on stderr.
SnapshotPtr maybe_update_best(SnapshotPtr best, const ExpertView& expert, double batch_loss, std::size_t step);

// Standalone single-expert model made of the shared tensors of `params` and
// the snapshot's partition: n_layers_total = layers_per_expert, n_experts = 1.
ParamStore<float> materialize_best(const ParamStore<float>& params, const BestExpertSnapshot& best);

}  // namespace eoe
