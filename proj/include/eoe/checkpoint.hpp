// SPDX-License-Identifier: Apache-2.0
//
// Best-expert checkpoint. Only the winning expert is stored, as a standalone
// model whose depth is layers_per_expert.
//
//   "EOEC" | u32 version = 1 | u32 header_len | header text | f32 tensors
//
// The header is `key=value` lines in a fixed order (vocab_size, ctx_len,
// n_layers, d_model, n_heads, d_ff, tie_head, source_expert_id, best_loss,
// step). Tensors follow in canonical order: wte, wpe, each block, lnf, and
// head when untied. All integers and floats are little-endian.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "eoe/experts.hpp"
#include "eoe/model.hpp"

namespace eoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::size_t source_expert_id = 0;
    double best_loss = 0.0;
    std::size_t step = 0;

    bool operator==(const CheckpointMeta&) const = default;
};

struct CheckpointHeader {
    ModelConfig config;  // standalone: n_layers_total = layers_per_expert, n_experts = 1
    CheckpointMeta meta;
    std::uint64_t scalar_count = 0;
    std::uint64_t file_bytes = 0;
};

struct LoadedCheckpoint {
    ModelConfig config;
    ParamStore<float> params;
    CheckpointMeta meta;
};

// Magic, version, header length and header text for a standalone config.
std::vector<unsigned char> encode_checkpoint_prefix(const ModelConfig& standalone, const CheckpointMeta& meta);

void save_best_checkpoint(const ParamStore<float>& params, const BestExpertSnapshot& best,
                          const ModelConfig& model_config, const std::filesystem::path& path);

// Parses the header and checks the file length it implies, without reading
// tensor data.
CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace eoe
