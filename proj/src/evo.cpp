// SPDX-License-Identifier: Apache-2.0
#include "eoe/evo.hpp"

namespace eoe {

namespace {

void check_congruent(std::span<Tensor* const> current, std::span<const Tensor* const> other, const char* what) {
    if (current.size() != other.size()) {
        throw UsageError(std::string(what) + ": tensor count " + std::to_string(current.size()) + " vs " +
                         std::to_string(other.size()));
    }
    for (std::size_t i = 0; i < current.size(); ++i) {
        if (current[i]->shape() != other[i]->shape()) {
            throw UsageError(std::string(what) + ": shape " + shape_to_string(current[i]->shape()) + " vs " +
                             shape_to_string(other[i]->shape()) + " at tensor " + std::to_string(i));
        }
    }
}

}  // namespace

void EvoConfig::validate() const {
    auto fail = [](const std::string& msg) { throw UsageError("invalid evo config: " + msg); };
    if (!(r_social >= 0.0) || !(mutation_scale >= 0.0)) {
        fail("r_social and mutation_scale must be >= 0");
    }
    if (!(r_c >= 0.0 && r_c <= 1.0) || !(r_m >= 0.0 && r_m <= 1.0)) {
        fail("r_c and r_m must lie in [0, 1]");
    }
}

std::string to_string(EvoOperator op) {
    switch (op) {
        case EvoOperator::pso:
            return "pso";
        case EvoOperator::crossover:
            return "crossover";
        case EvoOperator::mutation:
            return "mutation";
    }
    return "?";
}

EvoOperator parse_evo_operator(std::string_view name) {
    if (name == "pso") {
        return EvoOperator::pso;
    }
    if (name == "crossover") {
        return EvoOperator::crossover;
    }
    if (name == "mutation") {
        return EvoOperator::mutation;
    }
    throw UsageError("unknown evolutionary operator '" + std::string(name) + "'");
}

void pso_pull(std::span<Tensor* const> current, std::span<const Tensor* const> best, double r_social, Rng& rng) {
    check_congruent(current, best, "pso_pull");
    for (std::size_t i = 0; i < current.size(); ++i) {
        Tensor& theta = *current[i];
        const Tensor& target = *best[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const double p = rng.uniform();
            const double x = theta[j];
            theta[j] = static_cast<float>(x + r_social * p * (static_cast<double>(target[j]) - x));
        }
    }
}

std::size_t crossover(std::span<Tensor* const> current, std::span<const Tensor* const> best, double r_c, Rng& rng) {
    check_congruent(current, best, "crossover");
    std::size_t copied = 0;
    for (std::size_t i = 0; i < current.size(); ++i) {
        Tensor& theta = *current[i];
        const Tensor& target = *best[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            if (rng.uniform() < r_c) {
                theta[j] = target[j];
                ++copied;
            }
        }
    }
    return copied;
}

std::size_t mutate(std::span<Tensor* const> current, std::span<const Tensor* const> v_hat, double r_m,
                   double mutation_scale, Rng& rng) {
    check_congruent(current, v_hat, "mutate");
    for (const Tensor* v : v_hat) {
        for (float x : v->values()) {
            if (x < 0.0f) {
                throw DomainError("mutate: second moment has a negative element");
            }
        }
    }
    std::size_t mutated = 0;
    for (std::size_t i = 0; i < current.size(); ++i) {
        Tensor& theta = *current[i];
        const Tensor& v = *v_hat[i];
        for (std::size_t j = 0; j < theta.size(); ++j) {
            if (rng.uniform() < r_m) {
                const double noise = rng.gaussian(mutation_scale * static_cast<double>(v[j]));
                theta[j] = static_cast<float>(static_cast<double>(theta[j]) + noise);
                ++mutated;
            }
        }
    }
    return mutated;
}

EvoReport apply_evolution(const ExpertView& expert, const BestExpertSnapshot* best, const AdamWState& state,
                          double beta2, const EvoConfig& config, Rng& rng) {
    EvoReport report;
    if (!config.enabled || best == nullptr || best->source_expert_id == expert.expert_id) {
        return report;
    }
    std::vector<Tensor*> current;
    current.reserve(expert.partition.size());
    for (const auto& ref : expert.partition) {
        current.push_back(ref.tensor);
    }
    const std::vector<const Tensor*> target = best->tensors();

    for (EvoOperator op : config.order) {
        switch (op) {
            case EvoOperator::pso:
                pso_pull(current, target, config.r_social, rng);
                break;
            case EvoOperator::crossover:
                report.copied += crossover(current, target, config.r_c, rng);
                break;
            case EvoOperator::mutation: {
                std::vector<Tensor> v_hat;
                v_hat.reserve(expert.partition.size());
                for (const auto& ref : expert.partition) {
                    v_hat.push_back(state.second_moment_hat(ref.name, beta2));
                }
                std::vector<const Tensor*> v_refs;
                for (const Tensor& v : v_hat) {
                    v_refs.push_back(&v);
                }
                report.mutated += mutate(current, v_refs, config.r_m, config.mutation_scale, rng);
                break;
            }
        }
    }
    return report;
}

}  // namespace eoe
