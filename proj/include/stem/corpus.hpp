#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace stem {
namespace corpus {

// Reserved token ids shared across synthetic corpora and tokenizers.
constexpr std::int32_t kPadToken = 0;
constexpr std::int32_t kUnknownToken = 1;
constexpr std::int32_t kMarkerToken = 2;  // needle marker in retrieval data
constexpr std::int32_t kFirstContentToken = 3;

// First-order Markov chain over [kFirstContentToken, vocab): every token has
// `branch` preferred successors drawn once per seed, walked with Zipf-skewed
// branch choice. Learnable structure with a realistic unigram skew.
std::vector<std::int32_t> markov(std::size_t n, std::size_t vocab, std::uint64_t seed,
                                 std::size_t branch = 4);

struct CountryCorpus {
    std::vector<std::int32_t> tokens;  // stream of (entity, capital) adjacents
    std::vector<std::pair<std::int32_t, std::int32_t>> facts;  // entity -> capital
    std::size_t vocab = 0;
};

// n_pairs synthetic entity->capital facts; the stream repeats every fact
// `reps` times in seeded shuffled order, capital always directly after its
// entity.
CountryCorpus country_capital(std::size_t n_pairs, std::size_t reps, std::uint64_t seed);

// Training stream for needle retrieval: instances of `instance_len` tokens,
// each holding `pairs` answered key/value needles that repeat once later in
// the instance, back to back.
std::vector<std::int32_t> niah_stream(std::size_t n_instances, std::size_t instance_len,
                                      std::size_t vocab, std::uint64_t seed,
                                      std::size_t pairs = 2);

}  // namespace corpus
}  // namespace stem
