// SPDX-License-Identifier: Apache-2.0
//
// GPT-2 style decoder: learned token and position embeddings, pre-LN blocks
// (causal multi-head attention, tanh-GELU MLP), final LayerNorm and an output
// head that is tied to the token embedding by default.
//
// The block stack is divided into n_experts contiguous partitions. forward()
// and backward() run through exactly one partition, so activations and
// gradients exist only for the shared input/output tensors plus the
// layers_per_expert blocks of that partition.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "eoe/rng.hpp"
#include "eoe/tensor.hpp"
#include "eoe/token_batch.hpp"

namespace eoe {

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t ctx_len = 0;
    std::size_t n_layers_total = 0;
    std::size_t n_experts = 1;
    std::size_t d_model = 0;
    std::size_t n_heads = 0;
    std::size_t d_ff = 0;  // 0 selects 4 * d_model
    bool tie_head = true;

    std::size_t layers_per_expert() const noexcept { return n_layers_total / n_experts; }
    std::size_t head_dim() const noexcept { return d_model / n_heads; }
    std::size_t ffn_dim() const noexcept { return d_ff == 0 ? 4 * d_model : d_ff; }

    // Throws UsageError describing the first violated constraint.
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct BlockParams {
    BasicTensor<T> ln1_g, ln1_b;
    BasicTensor<T> qkv_w, qkv_b;    // [3d x d], [3d]
    BasicTensor<T> proj_w, proj_b;  // [d x d], [d]
    BasicTensor<T> ln2_g, ln2_b;
    BasicTensor<T> fc_w, fc_b;          // [d_ff x d], [d_ff]
    BasicTensor<T> fcproj_w, fcproj_b;  // [d x d_ff], [d]
};

template <class T>
struct InputParams {
    BasicTensor<T> wte;  // [vocab x d]
    BasicTensor<T> wpe;  // [ctx x d]
};

template <class T>
struct OutputParams {
    BasicTensor<T> lnf_g, lnf_b;
    std::optional<BasicTensor<T>> head;  // [vocab x d]; empty when tied to wte
};

// Canonical tensor order, shared by the optimizer state keys, the
// evolutionary operators, and the checkpoint layout.
template <class Block, class F>
void visit_block(Block& b, F&& f) {
    f("ln1.g", b.ln1_g);
    f("ln1.b", b.ln1_b);
    f("attn.qkv.w", b.qkv_w);
    f("attn.qkv.b", b.qkv_b);
    f("attn.proj.w", b.proj_w);
    f("attn.proj.b", b.proj_b);
    f("ln2.g", b.ln2_g);
    f("ln2.b", b.ln2_b);
    f("mlp.fc.w", b.fc_w);
    f("mlp.fc.b", b.fc_b);
    f("mlp.proj.w", b.fcproj_w);
    f("mlp.proj.b", b.fcproj_b);
}

template <class Input, class F>
void visit_input(Input& in, F&& f) {
    f("wte", in.wte);
    f("wpe", in.wpe);
}

template <class Output, class F>
void visit_output(Output& out, F&& f) {
    f("lnf.g", out.lnf_g);
    f("lnf.b", out.lnf_b);
    if (out.head) {
        f("head", *out.head);
    }
}

std::string block_tensor_name(std::size_t block, std::string_view field);

template <class TensorT>
struct NamedRef {
    std::string name;
    TensorT* tensor = nullptr;
};

template <class T>
struct ParamStore {
    ModelConfig config;
    InputParams<T> input;
    std::vector<BlockParams<T>> blocks;  // n_layers_total entries
    OutputParams<T> output;

    const BasicTensor<T>& head_weight() const noexcept { return output.head ? *output.head : input.wte; }

    std::vector<NamedRef<BasicTensor<T>>> named();
    std::vector<NamedRef<const BasicTensor<T>>> named() const;
};

// Gradients for one expert: shared tensors plus that expert's partition.
// Tensors of every other partition are absent.
template <class T>
struct GradStore {
    std::size_t expert_id = 0;
    std::size_t block_begin = 0;         // global index of blocks[0]
    InputParams<T> input;                // wte grad includes the tied head
    std::vector<BlockParams<T>> blocks;  // layers_per_expert entries
    OutputParams<T> output;

    std::vector<NamedRef<const BasicTensor<T>>> named() const;
    const BasicTensor<T>* find(std::string_view name) const;
};

template <class T>
struct LayerTape {
    BasicTensor<T> in;                    // residual stream entering the block
    BasicTensor<T> ln1, ln1_mean, ln1_rstd;
    BasicTensor<T> qkv;                   // [B*T x 3d]
    BasicTensor<T> att;                   // [B x H x T x T] post-softmax
    BasicTensor<T> atty;                  // [B*T x d]
    BasicTensor<T> res2;                  // after attention residual
    BasicTensor<T> ln2, ln2_mean, ln2_rstd;
    BasicTensor<T> fch, fch_gelu;         // [B*T x d_ff]
};

// Forward intermediates for one batch through one expert.
// layers.size() == layers_per_expert.
template <class T>
struct ActivationTape {
    std::size_t expert_id = 0;
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    std::vector<TokenId> tokens;
    std::vector<LayerTape<T>> layers;
    BasicTensor<T> out;  // residual stream after the last block
    BasicTensor<T> lnf, lnf_mean, lnf_rstd;
    BasicTensor<T> logits;  // [B x T x vocab]
};

// Weights ~ N(0, 0.02^2), residual projections further scaled by
// 1/sqrt(2 * layers_per_expert); biases zero; LayerNorm gains one.
template <class T>
ParamStore<T> init_params(const ModelConfig& config, Rng& rng);

// Every tensor zero except LayerNorm gains (one). Its output distribution
// is uniform over the vocabulary.
template <class T>
ParamStore<T> zero_params(const ModelConfig& config);

template <class U, class T>
ParamStore<U> convert_params(const ParamStore<T>& params);

template <class T>
ActivationTape<T> forward(const ParamStore<T>& params, std::size_t expert_id, const TokenBatch& batch);

// Mean cross-entropy over positions whose target is not the ignore marker
// (vocab_size). Softmax is evaluated in double with max subtraction.
template <class T>
double loss(const BasicTensor<T>& logits, const TokenBatch& batch);

template <class T>
GradStore<T> backward(const ParamStore<T>& params, std::size_t expert_id, const ActivationTape<T>& tape,
                      const TokenBatch& batch);

enum class Scope { full, expert };

struct TensorInfo {
    std::string name;
    Shape shape;

    bool operator==(const TensorInfo&) const = default;
};

// Names and shapes of every parameter in canonical order, computed from the
// config alone (nothing is allocated).
std::vector<TensorInfo> tensor_inventory(const ModelConfig& config);

std::uint64_t count_params(const ModelConfig& config, Scope scope);

// Matmul FLOPs per token (2 per multiply-add), split by where they occur.
// Attention includes the qkv and output projections plus the score and
// value mixing terms evaluated at the full context length.
struct FlopCount {
    std::uint64_t attention = 0;
    std::uint64_t ffn = 0;
    std::uint64_t head = 0;

    std::uint64_t encoder() const noexcept { return attention + ffn; }
    std::uint64_t total() const noexcept { return attention + ffn + head; }
};

FlopCount flop_count(const ModelConfig& config, Scope scope);
std::uint64_t flops_per_token(const ModelConfig& config, Scope scope);

}  // namespace eoe
