// SPDX-License-Identifier: Apache-2.0
#include "eoe/data.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>

#include "eoe/errors.hpp"

namespace eoe {

namespace {

constexpr std::array<char, 4> kMagic{'E', 'O', 'E', 'T'};

template <class U>
void put_le(std::vector<unsigned char>& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
    }
}

template <class U>
U get_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    }
    return static_cast<U>(v);
}

std::size_t width_for(std::uint32_t vocab) {
    return vocab > 65535 ? 4 : 2;
}

ShardHeader parse_header(std::ifstream& in, const std::filesystem::path& path) {
    std::array<unsigned char, kShardHeaderBytes> raw{};
    in.read(reinterpret_cast<char*>(raw.data()), raw.size());
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw LengthError(path.string() + ": file shorter than the 20-byte shard header");
    }
    if (std::memcmp(raw.data(), kMagic.data(), kMagic.size()) != 0) {
        throw FormatError(path.string() + ": bad magic, not an EOET token shard");
    }
    ShardHeader h{get_le<std::uint32_t>(raw.data() + 4), get_le<std::uint32_t>(raw.data() + 8),
                  get_le<std::uint64_t>(raw.data() + 12)};
    if (h.version != kShardVersion) {
        throw FormatError(path.string() + ": unsupported shard version " + std::to_string(h.version));
    }
    const std::uintmax_t expected = kShardHeaderBytes + h.token_count * width_for(h.vocab_size);
    const std::uintmax_t actual = std::filesystem::file_size(path);
    if (actual < expected) {
        throw LengthError(path.string() + ": header declares " + std::to_string(h.token_count) +
                          " tokens but the payload is truncated (" + std::to_string(actual) + " of " +
                          std::to_string(expected) + " bytes)");
    }
    if (actual > expected) {
        throw FormatError(path.string() + ": " + std::to_string(actual - expected) +
                          " trailing bytes after the declared payload");
    }
    return h;
}

std::ifstream open_for_read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return in;
}

}  // namespace

void write_shard(std::span<const TokenId> tokens, std::uint32_t vocab_size, const std::filesystem::path& path) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] >= vocab_size) {
            throw ValidationError("token " + std::to_string(tokens[i]) + " at index " + std::to_string(i) +
                                  " is not below vocab_size " + std::to_string(vocab_size));
        }
    }
    const std::size_t width = width_for(vocab_size);
    std::vector<unsigned char> bytes;
    bytes.reserve(kShardHeaderBytes + tokens.size() * width);
    bytes.insert(bytes.end(), kMagic.begin(), kMagic.end());
    put_le(bytes, kShardVersion);
    put_le(bytes, vocab_size);
    put_le(bytes, static_cast<std::uint64_t>(tokens.size()));
    for (TokenId t : tokens) {
        if (width == 2) {
            put_le(bytes, static_cast<std::uint16_t>(t));
        } else {
            put_le(bytes, static_cast<std::uint32_t>(t));
        }
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("failed writing shard " + path.string());
    }
}

ShardHeader read_shard_header(const std::filesystem::path& path) {
    std::ifstream in = open_for_read(path);
    return parse_header(in, path);
}

TokenShard read_shard(const std::filesystem::path& path) {
    std::ifstream in = open_for_read(path);
    const ShardHeader h = parse_header(in, path);
    const std::size_t width = width_for(h.vocab_size);
    TokenShard shard;
    shard.vocab_size = h.vocab_size;
    shard.tokens.resize(h.token_count);
    // The file length was validated against the header, so the allocation
    // above is bounded by the file; the payload is decoded in chunks.
    std::vector<unsigned char> chunk(std::size_t{1} << 16);
    std::size_t index = 0;
    while (index < shard.tokens.size()) {
        const std::size_t n = std::min(chunk.size() / width, shard.tokens.size() - index);
        in.read(reinterpret_cast<char*>(chunk.data()), static_cast<std::streamsize>(n * width));
        if (in.gcount() != static_cast<std::streamsize>(n * width)) {
            throw LengthError(path.string() + ": truncated payload");
        }
        for (std::size_t k = 0; k < n; ++k, ++index) {
            const unsigned char* p = chunk.data() + k * width;
            const TokenId t = width == 2 ? get_le<std::uint16_t>(p) : get_le<std::uint32_t>(p);
            if (t >= h.vocab_size) {
                throw ValidationError(path.string() + ": token " + std::to_string(t) + " at index " +
                                      std::to_string(index) + " is not below vocab_size " +
                                      std::to_string(h.vocab_size));
            }
            shard.tokens[index] = t;
        }
    }
    return shard;
}

TokenBatch batch_from_windows(const TokenShard& shard, std::span<const std::size_t> starts, std::size_t seq_len) {
    TokenBatch b;
    b.batch = starts.size();
    b.seq_len = seq_len;
    b.inputs.reserve(b.positions());
    b.targets.reserve(b.positions());
    for (std::size_t s : starts) {
        if (s + seq_len + 1 > shard.tokens.size()) {
            throw CapacityError("window at " + std::to_string(s) + " runs past the end of the shard");
        }
        b.inputs.insert(b.inputs.end(), shard.tokens.begin() + static_cast<std::ptrdiff_t>(s),
                        shard.tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len));
        b.targets.insert(b.targets.end(), shard.tokens.begin() + static_cast<std::ptrdiff_t>(s + 1),
                         shard.tokens.begin() + static_cast<std::ptrdiff_t>(s + seq_len + 1));
    }
    return b;
}

namespace {

void check_capacity(const TokenShard& shard, std::size_t batch, std::size_t seq_len) {
    if (batch == 0 || seq_len == 0) {
        throw UsageError("batch size and sequence length must be positive");
    }
    if (shard.tokens.size() < seq_len + 1) {
        throw CapacityError("shard holds " + std::to_string(shard.tokens.size()) + " tokens; at least " +
                            std::to_string(seq_len + 1) + " are needed for one window");
    }
}

}  // namespace

TokenBatch sample_batch(const TokenShard& shard, std::size_t batch, std::size_t seq_len, Rng& rng) {
    check_capacity(shard, batch, seq_len);
    const std::size_t n_starts = shard.tokens.size() - seq_len;
    std::vector<std::size_t> starts(batch);
    for (auto& s : starts) {
        s = static_cast<std::size_t>(rng.below(n_starts));
    }
    return batch_from_windows(shard, starts, seq_len);
}

TokenBatch SequentialSampler::next(const TokenShard& shard, std::size_t batch, std::size_t seq_len) {
    check_capacity(shard, batch, seq_len);
    std::vector<std::size_t> starts(batch);
    for (auto& s : starts) {
        if (cursor_ + seq_len + 1 > shard.tokens.size()) {
            cursor_ = 0;
        }
        s = cursor_;
        cursor_ += seq_len;
    }
    return batch_from_windows(shard, starts, seq_len);
}

std::size_t window_capacity(const TokenShard& shard, std::size_t seq_len) noexcept {
    if (seq_len == 0 || shard.tokens.size() < seq_len + 1) {
        return 0;
    }
    return (shard.tokens.size() - 1) / seq_len;
}

std::vector<TokenBatch> sample_eval_batches(const TokenShard& shard, std::size_t n_batches, std::size_t batch,
                                            std::size_t seq_len, Rng& rng) {
    check_capacity(shard, batch, seq_len);
    const std::size_t windows = window_capacity(shard, seq_len);
    const std::size_t needed = n_batches * batch;
    if (needed > windows) {
        throw CapacityError("requested " + std::to_string(n_batches) + " batches of " + std::to_string(batch) +
                            " windows but the shard holds only " + std::to_string(windows) +
                            " non-overlapping windows of length " + std::to_string(seq_len));
    }
    // Partial Fisher-Yates over window indices.
    std::vector<std::size_t> order(windows);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = 0; i < needed; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(windows - i));
        std::swap(order[i], order[j]);
    }
    std::vector<TokenBatch> batches;
    batches.reserve(n_batches);
    std::vector<std::size_t> starts(batch);
    for (std::size_t k = 0; k < n_batches; ++k) {
        for (std::size_t b = 0; b < batch; ++b) {
            starts[b] = order[k * batch + b] * seq_len;
        }
        batches.push_back(batch_from_windows(shard, starts, seq_len));
    }
    return batches;
}

}  // namespace eoe
