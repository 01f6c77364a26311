// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace eoe {

using TokenId = std::uint32_t;

// B sequences of T tokens, row-major. targets[b][t] is the token that
// follows inputs[b][t]; a target equal to the model's vocab_size is ignored
// by the loss.
struct TokenBatch {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<TokenId> inputs;
    std::vector<TokenId> targets;

    std::size_t positions() const noexcept { return batch * seq_len; }
};

}  // namespace eoe
