// SPDX-License-Identifier: Apache-2.0
//
// Evolutionary operators that pull the expert just trained toward the best
// expert snapshot. All three act on partition parameters after the AdamW
// update and draw one uniform p per element, visiting tensors in partition
// order and elements in storage order. Arithmetic is done in double and
// rounded once to float.
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "eoe/experts.hpp"
#include "eoe/optim.hpp"
#include "eoe/rng.hpp"

namespace eoe {

enum class EvoOperator { pso, crossover, mutation };

struct EvoConfig {
    bool enabled = true;
    double r_social = 0.1;
    double r_c = 0.01;
    double r_m = 0.001;
    double mutation_scale = 1.0;  // s = mutation_scale * v_hat
    std::vector<EvoOperator> order{EvoOperator::pso, EvoOperator::crossover, EvoOperator::mutation};

    void validate() const;
};

std::string to_string(EvoOperator op);
EvoOperator parse_evo_operator(std::string_view name);

struct EvoReport {
    std::size_t copied = 0;
    std::size_t mutated = 0;

    bool operator==(const EvoReport&) const = default;
};

// theta += r_social * p * (best - theta), p ~ U[0,1) per element.
void pso_pull(std::span<Tensor* const> current, std::span<const Tensor* const> best, double r_social, Rng& rng);

// theta = best where p < r_c. Returns the number of copied elements.
std::size_t crossover(std::span<Tensor* const> current, std::span<const Tensor* const> best, double r_c, Rng& rng);

// theta += N(0, mutation_scale * v_hat) where p < r_m. The gaussian is drawn
// only for selected elements. Returns the number of mutated elements.
std::size_t mutate(std::span<Tensor* const> current, std::span<const Tensor* const> v_hat, double r_m,
                   double mutation_scale, Rng& rng);

// Applies config.order to the partition of `expert`. No-op (and no RNG use)
// when disabled, when there is no snapshot yet, or when the snapshot came
// from this same expert.
EvoReport apply_evolution(const ExpertView& expert, const BestExpertSnapshot* best, const AdamWState& state,
                          double beta2, const EvoConfig& config, Rng& rng);

}  // namespace eoe
