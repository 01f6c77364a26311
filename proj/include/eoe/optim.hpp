// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, applied to one expert per step.
// Moments are keyed by tensor name: the shared input/output tensors carry a
// single history across all experts, each partition keeps its own, and the
// bias correction uses each tensor's own update count.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "eoe/experts.hpp"
#include "eoe/model.hpp"

namespace eoe {

enum class LrSchedule { constant, warmup_cosine };

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    LrSchedule schedule = LrSchedule::constant;
    std::size_t warmup_steps = 0;
    double min_lr_fraction = 0.1;
    double max_grad_norm = 0.0;  // global-norm clipping; 0 disables

    void validate() const;
};

struct Moments {
    Tensor m;
    Tensor v;
    std::uint64_t t = 0;
};

class AdamWState {
public:
    // Created lazily at zero on first use.
    Moments& moments(const std::string& name, const Shape& shape);
    const Moments* find(std::string_view name) const;

    // v / (1 - beta2^t); throws UsageError if the tensor has never been stepped.
    Tensor second_moment_hat(std::string_view name, double beta2) const;

    std::size_t size() const noexcept { return entries_.size(); }
    // Scalars held in m and v across all tensors.
    std::size_t moment_scalars() const noexcept;

    const std::map<std::string, Moments, std::less<>>& entries() const noexcept { return entries_; }

private:
    std::map<std::string, Moments, std::less<>> entries_;
};

// Learning rate for 1-based step `step` of `total_steps`. warmup_cosine ramps
// linearly from 0 to lr over warmup_steps, then follows a half cosine down to
// min_lr_fraction * lr at total_steps.
double lr_at(const AdamWConfig& config, std::size_t step, std::size_t total_steps);

// One AdamW update of every tensor in `expert` using `lr` (already scheduled).
// grads must cover exactly the expert's tensors. A non-finite gradient aborts
// the whole update before anything is modified (NumericError naming the tensor).
void adamw_step(const ExpertView& expert, const GradStore<float>& grads, AdamWState& state, const AdamWConfig& config,
                double lr);

}  // namespace eoe
