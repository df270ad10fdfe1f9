#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stem/tensor.hpp"

namespace stem {

// Gated FFN weights. Rows of w_up are the addressing keys, rows of w_gate the
// gating keys, and columns of w_down the stored values.
struct SwiGluParams {
    Tensor w_gate;  // [d_ff x d]
    Tensor w_up;    // [d_ff x d]
    Tensor w_down;  // [d x d_ff]
};

// Per-layer token-indexed embedding table replacing the up projection.
struct StemTable {
    Tensor table;  // [V x d_ff]
    int layer_index = -1;
};

struct MoeParams {
    std::vector<SwiGluParams> experts;
    Tensor router;  // [K x d]
    int top_r = 1;
};

// Fixed balanced token-id -> expert mapping.
struct HashRouter {
    std::vector<std::int32_t> mapping;  // length V
    int num_experts = 0;

    std::vector<std::size_t> bucket_sizes() const;
};

// Hybrid: keeps the up projection and adds the token row to its output.
struct StemDaggerParams {
    SwiGluParams ffn;
    Tensor table;  // [V x d_ff]
};

struct AttentionParams {
    Tensor w_q, w_k, w_v, w_o;  // each [d x d]
    int heads = 1;
};

// x is a batch of positions, shape [n x d]; token_ids (where taken) has one
// vocabulary id per row.

// y = W_d( SiLU(W_g x) ⊙ (W_u x) )
Tensor swiglu_forward(const Ctx& ctx, const Tensor& x, const SwiGluParams& p);

// y = W_d( SiLU(W_g x) ⊙ U[t] )
Tensor stem_forward(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> token_ids,
                    const StemTable& table, const Tensor& w_gate, const Tensor& w_down);

// Gate-replacement ablation: y = W_d( SiLU(U[t]) ⊙ (W_u x) )
Tensor stem_gate_forward(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> token_ids,
                         const StemTable& table, const Tensor& w_up, const Tensor& w_down);

// y = W_d( SiLU(W_g x) ⊙ (W_u x + U[t]) )
Tensor stem_dagger_forward(const Ctx& ctx, const Tensor& x,
                           std::span<const std::int32_t> token_ids, const StemDaggerParams& p);

// Learned router: softmax over all K experts, keep the top_r by weight
// (ties to the lower expert index), renormalize over the kept set.
Tensor moe_forward(const Ctx& ctx, const Tensor& x, const MoeParams& p);

// Weightless top-1 by token id: y = f_hash(t)(x).
Tensor hash_moe_forward(const Ctx& ctx, const Tensor& x, std::span<const std::int32_t> token_ids,
                        const std::vector<SwiGluParams>& experts, const HashRouter& router);

// Seeded permutation of token ids followed by modulo; bucket sizes differ by
// at most one.
HashRouter build_hash_router(std::size_t vocab, int num_experts, std::uint64_t seed);

// Plain (permute-free) modulo mapping.
HashRouter modulo_hash_router(std::size_t vocab, int num_experts);

// Expert width that matches a hash-MoE layer's parameter count to a STEM
// layer's (table V*d_ff plus gate and down projections) at the same K.
std::size_t hash_moe_expert_width(std::size_t d, std::size_t d_ff, std::size_t vocab, int experts);

// Multi-head causal self-attention with rotary positions.
Tensor causal_attention(const Ctx& ctx, const Tensor& x, const AttentionParams& p,
                        std::size_t pos0 = 0);

}  // namespace stem
