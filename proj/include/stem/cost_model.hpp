#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "stem/model.hpp"

namespace stem {
namespace cost {

// Architecture hyperparameters the analytic formulas run on. All counts are
// in multiply-accumulate units for matmuls plus one unit per elementwise
// product (the gate ⊙), matching the per-layer accounting convention; loads
// are in parameter/KV elements.
struct ArchHyperparams {
    double d = 0;     // model width
    double d_ff = 0;  // FFN hidden size
    double L = 0;     // sequence / context length
    double B = 1;     // batch size
    double V = 0;     // vocabulary size (informational)
};

enum class FfnKind { base, stem };

// Per-layer FFN-block forward cost: base B(3*d_ff*d*L + d_ff*L),
// stem B(2*d_ff*d*L + d_ff*L).
double prefill_flops(const ArchHyperparams& h, FfnKind kind);

// Per-layer training (forward+backward) cost including attention:
// base B(4Ld^2 + 2L^2 d + 3Ld*d_ff), stem with 2Ld*d_ff.
double train_flops(const ArchHyperparams& h, FfnKind kind);

// d_ff / (4d + 2L + 3d_ff); governs both the training-FLOP and the
// decode-load reduction.
double saving_fraction(double d, double d_ff, double L);

// Per-decode-step parameter + KV load in elements:
// base B(4d^2 + 2Ld + 3d*d_ff), stem B(2Ld + 4d^2 + 2d*d_ff).
double decode_mem(const ArchHyperparams& h, FfnKind kind);

enum class Phase { prefill, decode, training };

// Elements moved between tiers for the token-indexed tables: unique tokens
// times d_ff; doubled during training (gradients travel back).
std::uint64_t comm_cost(Phase phase, std::span<const std::int32_t> token_ids, std::size_t d_ff);

// |S| * d_ff * unique(tokens)
std::uint64_t activated_params(std::size_t table_layer_count, std::size_t d_ff,
                               std::span<const std::int32_t> tokens);

// Accuracy per unit of training compute, and the ratio normalized against a
// baseline run.
double roi(double avg_accuracy, double total_train_flops);
double roi_normalized(double accuracy, double flops, double base_accuracy, double base_flops);

struct CostReport {
    ArchHyperparams h;
    double prefill_flops_base = 0, prefill_flops_stem = 0;
    double train_flops_base = 0, train_flops_stem = 0;
    double decode_mem_base = 0, decode_mem_stem = 0;
    double decode_param_bytes_base = 0, decode_param_bytes_stem = 0;  // 8 bytes per element
    double prefill_delta = 0, train_delta = 0, decode_delta = 0;
    double saving = 0;
    std::uint64_t comm_elements_prefill = 0, comm_elements_decode = 0, comm_elements_training = 0;
};

CostReport make_report(const ArchHyperparams& h, std::span<const std::int32_t> batch_tokens,
                       std::span<const std::int32_t> decode_tokens);

// Instrumented counts from an actual forward pass, per layer, under the same
// counting convention as the formulas.
struct MeasuredFlops {
    std::vector<std::uint64_t> ffn_per_layer;
    std::vector<std::uint64_t> attn_per_layer;
    std::uint64_t head = 0;
    std::uint64_t total = 0;
};

MeasuredFlops measured_flops(const Model& model,
                             const std::vector<std::vector<std::int32_t>>& batch);

}  // namespace cost
}  // namespace stem
