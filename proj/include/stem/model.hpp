#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "stem/layers.hpp"
#include "stem/tensor.hpp"

namespace stem {

enum class Variant { dense, stem, stem_gate, stem_dagger, moe, hash_moe };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct MoeConfig {
    int experts = 0;
    int top_r = 1;
    std::size_t d_ff_expert = 0;  // 0 = derive from the parameter-matching helper
    std::uint64_t hash_seed = 0;
};

struct ModelConfig {
    std::size_t n_layers = 0;
    std::size_t d_model = 0;
    std::size_t d_ff = 0;
    std::size_t vocab = 0;
    std::size_t heads = 1;
    std::size_t max_len = 0;
    std::vector<Variant> variants;  // one per layer
    bool tie_embeddings = false;
    MoeConfig moe;
    double rope_base = 10000.0;

    void validate() const;
    // Layers whose FFN slot holds a token-indexed table (stem, stem_gate,
    // stem_dagger).
    std::vector<std::size_t> table_layers() const;
};

struct PlacementPolicy {
    enum class Kind { ratio_third, ratio_half, full_except_first, explicit_set };
    Kind kind = Kind::ratio_third;
    Variant variant = Variant::stem;
    std::vector<std::size_t> explicit_layers;
};

// Deterministic layer selection. Ratio(1/k) selects every k-th layer starting
// at index k-1; full_except_first selects {1..N-1}. An empty selection is a
// configuration error.
std::vector<std::size_t> select_placement(std::size_t n_layers, const PlacementPolicy& policy);

// Dense everywhere except the selected layers, which get policy.variant.
std::vector<Variant> variants_for(std::size_t n_layers, const PlacementPolicy& policy);

struct LayerParams {
    Variant variant = Variant::dense;
    Tensor attn_norm_gain;
    Tensor ffn_norm_gain;
    AttentionParams attn;
    SwiGluParams ffn;                   // dense / dagger; stem uses gate+down, stem_gate up+down
    Tensor table;                       // stem variants
    MoeParams moe;                      // learned-router MoE
    std::vector<SwiGluParams> experts;  // hash MoE
    HashRouter hash;
};

struct Model {
    ModelConfig config;
    Tensor embed;    // [V x d]
    Tensor lm_head;  // [V x d]; shares storage with embed when tied
    Tensor final_norm_gain;
    std::vector<LayerParams> layers;

    // Enumerates every trainable tensor with its stable checkpoint name, in a
    // fixed order.
    void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
    void visit_params(const std::function<void(const std::string&, const Tensor&)>& fn) const;

    Model clone() const;
};

Model build_model(const ModelConfig& config, std::uint64_t seed);

// Records which table rows each table layer actually looked up.
struct GatherTrace {
    std::map<std::size_t, std::vector<std::int32_t>> rows_per_layer;
};

// Per-position substitution of the table lookup result, applied to every
// table layer unless `layers` narrows the set. Inference only.
struct StemOverrides {
    std::map<std::size_t, std::map<std::size_t, std::vector<double>>> vectors;  // pos -> layer -> row
    std::set<std::size_t> layers;  // empty = all table layers
};

struct ForwardOptions {
    Tape* tape = nullptr;
    FlopCounter* flops = nullptr;
    GatherTrace* trace = nullptr;
    // Token ids used for table lookups; defaults to the input tokens. Length
    // must match the prompt. Inference only.
    const std::vector<std::int32_t>* stem_tokens = nullptr;
    const StemOverrides* overrides = nullptr;
    std::size_t pos0 = 0;
    // When set, receives the normalized FFN input of capture_layer.
    Tensor* capture_ffn_input = nullptr;
    std::size_t capture_layer = 0;
};

// Causal logits [L x V]. Table layers index the raw input token id at each
// position.
Tensor forward(const Model& model, std::span<const std::int32_t> tokens,
               const ForwardOptions& options = {});

struct ParamCensus {
    std::size_t total = 0;
    std::size_t table_entries = 0;  // across all table layers
    std::size_t active = 0;         // for the given token sequence
};

ParamCensus count_params(const Model& model, std::span<const std::int32_t> tokens);
std::size_t count_total_params(const Model& model);

}  // namespace stem
