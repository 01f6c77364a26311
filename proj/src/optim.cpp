// SPDX-License-Identifier: Apache-2.0
#include "eoe/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace eoe {

void AdamWConfig::validate() const {
    auto fail = [](const std::string& msg) { throw UsageError("invalid adamw config: " + msg); };
    if (!(lr > 0.0)) {
        fail("lr must be > 0");
    }
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
        fail("beta1 and beta2 must lie in (0, 1)");
    }
    if (!(eps > 0.0)) {
        fail("eps must be > 0");
    }
    if (!(weight_decay >= 0.0)) {
        fail("weight_decay must be >= 0");
    }
    if (!(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0)) {
        fail("min_lr_fraction must lie in [0, 1]");
    }
    if (!(max_grad_norm >= 0.0)) {
        fail("max_grad_norm must be >= 0");
    }
}

Moments& AdamWState::moments(const std::string& name, const Shape& shape) {
    auto it = entries_.find(name);
    if (it == entries_.end()) {
        it = entries_.emplace(name, Moments{Tensor(shape), Tensor(shape), 0}).first;
    } else if (it->second.m.shape() != shape) {
        throw DimensionError("moment shape " + shape_to_string(it->second.m.shape()) + " for " + name +
                             " does not match parameter shape " + shape_to_string(shape));
    }
    return it->second;
}

const Moments* AdamWState::find(std::string_view name) const {
    auto it = entries_.find(name);
    return it == entries_.end() ? nullptr : &it->second;
}

Tensor AdamWState::second_moment_hat(std::string_view name, double beta2) const {
    const Moments* mo = find(name);
    if (mo == nullptr || mo->t == 0) {
        throw UsageError("no second moment recorded for " + std::string(name));
    }
    const auto correction = static_cast<float>(1.0 - std::pow(beta2, static_cast<double>(mo->t)));
    Tensor out = mo->v;
    for (float& x : out.values()) {
        x /= correction;
    }
    return out;
}

std::size_t AdamWState::moment_scalars() const noexcept {
    std::size_t n = 0;
    for (const auto& [name, mo] : entries_) {
        n += mo.m.size() + mo.v.size();
    }
    return n;
}

double lr_at(const AdamWConfig& config, std::size_t step, std::size_t total_steps) {
    if (step > total_steps) {
        throw UsageError("step " + std::to_string(step) + " beyond total_steps " + std::to_string(total_steps));
    }
    if (config.schedule == LrSchedule::constant) {
        return config.lr;
    }
    if (step < config.warmup_steps) {
        return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
    }
    if (total_steps <= config.warmup_steps) {
        return config.lr;
    }
    const double progress =
        static_cast<double>(step - config.warmup_steps) / static_cast<double>(total_steps - config.warmup_steps);
    const double min_lr = config.min_lr_fraction * config.lr;
    return min_lr + (config.lr - min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_step(const ExpertView& expert, const GradStore<float>& grads, AdamWState& state, const AdamWConfig& config,
                double lr) {
    const std::vector<TensorRef> params = expert.all();
    if (grads.expert_id != expert.expert_id || grads.named().size() != params.size()) {
        throw UsageError("gradients do not cover exactly the tensors of expert " + std::to_string(expert.expert_id));
    }

    std::vector<const Tensor*> grad_of(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Tensor* g = grads.find(params[i].name);
        if (g == nullptr || g->shape() != params[i].tensor->shape()) {
            throw UsageError("missing or mis-shaped gradient for " + params[i].name);
        }
        if (!g->all_finite()) {
            throw NumericError("non-finite gradient in " + params[i].name + "; update of expert " +
                               std::to_string(expert.expert_id) + " aborted");
        }
        grad_of[i] = g;
    }

    float clip = 1.0f;
    if (config.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const Tensor* g : grad_of) {
            for (float x : g->values()) {
                sq += static_cast<double>(x) * x;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm > config.max_grad_norm) {
            clip = static_cast<float>(config.max_grad_norm / norm);
        }
    }

    const auto b1 = static_cast<float>(config.beta1);
    const auto b2 = static_cast<float>(config.beta2);
    const auto one_minus_b1 = static_cast<float>(1.0 - config.beta1);
    const auto one_minus_b2 = static_cast<float>(1.0 - config.beta2);
    const auto eps = static_cast<float>(config.eps);
    const auto eta = static_cast<float>(lr);
    const auto decay = static_cast<float>(lr * config.weight_decay);

    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& theta = *params[i].tensor;
        const Tensor& g = *grad_of[i];
        Moments& mo = state.moments(params[i].name, theta.shape());
        mo.t += 1;
        const auto bc1 = static_cast<float>(1.0 - std::pow(config.beta1, static_cast<double>(mo.t)));
        const auto bc2 = static_cast<float>(1.0 - std::pow(config.beta2, static_cast<double>(mo.t)));
        for (std::size_t j = 0; j < theta.size(); ++j) {
            const float gj = g[j] * clip;
            mo.m[j] = b1 * mo.m[j] + one_minus_b1 * gj;
            mo.v[j] = b2 * mo.v[j] + one_minus_b2 * gj * gj;
            const float m_hat = mo.m[j] / bc1;
            const float v_hat = mo.v[j] / bc2;
            theta[j] = theta[j] - eta * m_hat / (std::sqrt(v_hat) + eps) - decay * theta[j];
        }
    }
}

}  // namespace eoe
