#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "stem/model.hpp"

namespace stem {
namespace eval {

struct NiahInstance {
    std::vector<std::int32_t> context;  // filler + needle + query suffix
    std::int32_t key = 0;
    std::int32_t value = 0;            // the expected answer token
    std::size_t needle_pos = 0;
};

// Zipf filler with a single [marker, key, value] needle at a seeded position
// and a [marker, key] query suffix; greedy next-token after the suffix should
// be `value`. The filler range excludes the marker, so the needle occurs
// exactly once.
NiahInstance build_niah(std::size_t context_len, std::size_t vocab, std::uint64_t seed);

// Next-token logits for a prompt; adapters let tests substitute oracles.
using LogitsFn = std::function<std::vector<double>(const std::vector<std::int32_t>&)>;

LogitsFn model_logits(const Model& model);

// Greedy-decode the answer token for each instance; exact-match accuracy.
double score_retrieval(const LogitsFn& logits, const std::vector<NiahInstance>& instances);

// exp(mean token negative log-likelihood) over consecutive windows of
// seq_len + 1 tokens; a trailing partial window is dropped.
double val_ppl(const Model& model, std::span<const std::int32_t> corpus, std::size_t seq_len);

}  // namespace eval
}  // namespace stem
