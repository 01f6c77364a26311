// SPDX-License-Identifier: Apache-2.0
//
// Token shards and batch sampling.
//
// Shard layout (little-endian):
//   offset 0   magic "EOET"
//   offset 4   u32 version = 1
//   offset 8   u32 vocab_size
//   offset 12  u64 token_count
//   offset 20  token_count ids, u16 each (u32 when vocab_size > 65535)
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "eoe/rng.hpp"
#include "eoe/token_batch.hpp"

namespace eoe {

inline constexpr std::size_t kShardHeaderBytes = 20;
inline constexpr std::uint32_t kShardVersion = 1;

struct TokenShard {
    std::uint32_t vocab_size = 0;
    std::vector<TokenId> tokens;

    std::size_t token_width() const noexcept { return vocab_size > 65535 ? 4 : 2; }
    bool operator==(const TokenShard&) const = default;
};

struct ShardHeader {
    std::uint32_t version = 0;
    std::uint32_t vocab_size = 0;
    std::uint64_t token_count = 0;
};

void write_shard(std::span<const TokenId> tokens, std::uint32_t vocab_size, const std::filesystem::path& path);
TokenShard read_shard(const std::filesystem::path& path);
// Header only, after validating magic, version and file length.
ShardHeader read_shard_header(const std::filesystem::path& path);

// Batch whose row b is the window tokens[starts[b] .. starts[b] + T].
TokenBatch batch_from_windows(const TokenShard& shard, std::span<const std::size_t> starts, std::size_t seq_len);

// B window starts drawn uniformly (with replacement) from [0, count - T - 1].
TokenBatch sample_batch(const TokenShard& shard, std::size_t batch, std::size_t seq_len, Rng& rng);

// Walks the shard in consecutive non-overlapping windows, wrapping at the end.
class SequentialSampler {
public:
    TokenBatch next(const TokenShard& shard, std::size_t batch, std::size_t seq_len);

private:
    std::size_t cursor_ = 0;
};

// Number of non-overlapping windows of seq_len (+1 target) in the shard.
std::size_t window_capacity(const TokenShard& shard, std::size_t seq_len) noexcept;

// n_batches batches of distinct non-overlapping windows chosen at random
// without replacement. CapacityError when the shard holds fewer than
// n_batches * batch windows.
std::vector<TokenBatch> sample_eval_batches(const TokenShard& shard, std::size_t n_batches, std::size_t batch,
                                            std::size_t seq_len, Rng& rng);

}  // namespace eoe
