#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stem/model.hpp"

namespace stem {
namespace edit {

// Reserved padding token whose table row backs pad directives.
constexpr std::int32_t kPadToken = 0;

enum class SchemeKind { equal_swap, pad_left, pad_right, copy, subset, average };

struct Scheme {
    SchemeKind kind = SchemeKind::equal_swap;
    // For subset: which target indices replace the source positions. Empty
    // selects the last n_s target tokens.
    std::vector<std::size_t> subset_indices;
};

const char* scheme_name(SchemeKind kind);
Scheme scheme_from_name(const std::string& name);

// One directive per source position: either the row of a token id (resolved
// per layer at application time) or an explicit per-layer vector.
struct Directive {
    std::int32_t row_of = -1;
    std::map<std::size_t, std::vector<double>> vectors;  // table layer -> d_ff row

    bool is_vector() const { return row_of < 0; }
};

struct EditPlan {
    std::vector<Directive> directives;
    std::string scheme;
};

// Builds the per-position replacement mapping for the given scheme. The model
// supplies table rows where a scheme needs resolved vectors (averaging).
// Preconditions: equal_swap needs n_s == n_t, pad/copy need n_s > n_t, subset
// needs n_s < n_t.
EditPlan plan_edit(const Model& model, std::span<const std::int32_t> source_ids,
                   std::span<const std::int32_t> target_ids, const Scheme& scheme);

// Copy-on-write view: the base model plus per-position row substitutions for
// every table layer (or the subset given). The base model is never modified.
struct EditedModel {
    const Model* base = nullptr;
    StemOverrides overrides;
};

EditedModel apply_edit(const Model& model, std::span<const std::size_t> prompt_positions,
                       const EditPlan& plan, const std::set<std::size_t>& layer_subset = {});

Tensor forward_edited(const EditedModel& edited, std::span<const std::int32_t> tokens);

// Bakes a positional edit into the tables of a cloned model: for each edited
// position, the row of the prompt token at that position is overwritten. The
// edit becomes token-level (it affects every occurrence of those tokens).
Model materialize(const EditedModel& edited, std::span<const std::int32_t> prompt);

// Execution-time oracle: a forward pass in which the table lookups at the
// mapped positions use the mapped token id; everything else sees the original
// prompt.
Tensor remap_execute(const Model& model, std::span<const std::int32_t> prompt,
                     const std::map<std::size_t, std::int32_t>& position_to_token);

// Softmax over one logit row, then the k most probable tokens, ties broken by
// the lower id.
std::vector<std::pair<std::int32_t, double>> topk_next(std::span<const double> logits,
                                                       std::size_t k);

}  // namespace edit
}  // namespace stem
