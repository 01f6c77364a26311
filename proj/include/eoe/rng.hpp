// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

#include "eoe/errors.hpp"

namespace eoe {

// xoshiro256** seeded through splitmix64. Copyable so tests can replay a
// stream from a saved state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) noexcept;

    // Independent generator for a named sub-stream of one run seed.
    static Rng for_stream(std::uint64_t seed, std::uint64_t stream) noexcept;

    std::uint64_t next_u64() noexcept;

    // [0, 1) with 53 random bits; one generator step.
    double uniform() noexcept;

    // Uniform integer in [0, n); n must be positive. Unbiased (rejection).
    std::uint64_t below(std::uint64_t n) noexcept;

    // N(0, variance) by Box-Muller; always consumes two uniforms.
    // Throws DomainError for negative variance.
    double gaussian(double variance);

    const std::array<std::uint64_t, 4>& state() const noexcept { return s_; }

    friend bool operator==(const Rng&, const Rng&) = default;

private:
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace eoe
