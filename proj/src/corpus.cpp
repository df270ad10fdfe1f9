#include "stem/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "stem/errors.hpp"
#include "stem/rng.hpp"

namespace stem {
namespace corpus {

std::vector<std::int32_t> markov(std::size_t n, std::size_t vocab, std::uint64_t seed,
                                 std::size_t branch) {
    if (vocab <= static_cast<std::size_t>(kFirstContentToken) + 1) {
        throw ConfigError("markov corpus needs room beyond the reserved ids");
    }
    if (branch == 0) throw ConfigError("markov corpus needs at least one branch");
    const std::int32_t lo = kFirstContentToken;
    const std::size_t content = vocab - static_cast<std::size_t>(lo);
    Rng rng(seed);
    std::vector<std::int32_t> successors(content * branch);
    for (auto& s : successors) {
        s = lo + static_cast<std::int32_t>(rng.uniform_int(content));
    }
    // Zipf-skewed branch choice: the first successor dominates.
    std::vector<double> cdf(branch);
    double acc = 0.0;
    for (std::size_t b = 0; b < branch; ++b) {
        acc += 1.0 / static_cast<double>(b + 1);
        cdf[b] = acc;
    }
    for (double& c : cdf) c /= acc;

    std::vector<std::int32_t> out(n);
    std::int32_t cur = lo;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = cur;
        const double u = rng.uniform();
        std::size_t pick = 0;
        while (pick + 1 < branch && u > cdf[pick]) ++pick;
        cur = successors[static_cast<std::size_t>(cur - lo) * branch + pick];
    }
    return out;
}

CountryCorpus country_capital(std::size_t n_pairs, std::size_t reps, std::uint64_t seed) {
    if (n_pairs == 0 || reps == 0) throw ConfigError("country corpus needs pairs and repetitions");
    CountryCorpus c;
    c.vocab = static_cast<std::size_t>(kFirstContentToken) + 2 * n_pairs;
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const auto entity = static_cast<std::int32_t>(kFirstContentToken + i);
        const auto capital = static_cast<std::int32_t>(kFirstContentToken + n_pairs + i);
        c.facts.emplace_back(entity, capital);
    }
    std::vector<std::size_t> order;
    order.reserve(n_pairs * reps);
    for (std::size_t r = 0; r < reps; ++r) {
        for (std::size_t i = 0; i < n_pairs; ++i) order.push_back(i);
    }
    Rng rng(seed);
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    c.tokens.reserve(order.size() * 2);
    for (std::size_t i : order) {
        c.tokens.push_back(c.facts[i].first);
        c.tokens.push_back(c.facts[i].second);
    }
    return c;
}

std::vector<std::int32_t> niah_stream(std::size_t n_instances, std::size_t instance_len,
                                      std::size_t vocab, std::uint64_t seed, std::size_t pairs) {
    if (pairs == 0) throw ConfigError("niah stream needs at least one pair");
    if (instance_len < 6 * pairs + 2) {
        throw ConfigError("niah instances too short for the requested pair count");
    }
    if (vocab <= static_cast<std::size_t>(kFirstContentToken) + 2) {
        throw ConfigError("niah stream needs room beyond the reserved ids");
    }
    const std::int32_t lo = kFirstContentToken;
    const std::size_t content = vocab - static_cast<std::size_t>(lo);
    Rng rng(seed);
    std::vector<std::int32_t> out;
    out.reserve(n_instances * instance_len);
    for (std::size_t inst = 0; inst < n_instances; ++inst) {
        // Each key/value needle appears twice; the second occurrence is the
        // "query" the model learns to complete from the first.
        std::vector<std::array<std::int32_t, 3>> needles;
        for (std::size_t p = 0; p < pairs; ++p) {
            const auto key = lo + static_cast<std::int32_t>(rng.uniform_int(content));
            const auto value = lo + static_cast<std::int32_t>(rng.uniform_int(content));
            needles.push_back({kMarkerToken, key, value});
            needles.push_back({kMarkerToken, key, value});
        }
        // Seeded shuffle, then a stable pass so the first copy of every pair
        // precedes nothing it must not (copies are identical, order is free).
        for (std::size_t i = needles.size(); i > 1; --i) {
            std::swap(needles[i - 1], needles[rng.uniform_int(i)]);
        }
        const std::size_t filler_len = instance_len - 6 * pairs;
        std::vector<std::int32_t> filler(filler_len);
        for (auto& t : filler) t = lo + static_cast<std::int32_t>(rng.uniform_int(content));
        // Choose sorted insertion offsets into the filler.
        std::vector<std::size_t> offsets(needles.size());
        for (auto& o : offsets) o = rng.uniform_int(filler_len + 1);
        std::sort(offsets.begin(), offsets.end());
        std::size_t cursor = 0;
        for (std::size_t i = 0; i < needles.size(); ++i) {
            out.insert(out.end(), filler.begin() + static_cast<std::ptrdiff_t>(cursor),
                       filler.begin() + static_cast<std::ptrdiff_t>(offsets[i]));
            cursor = offsets[i];
            out.insert(out.end(), needles[i].begin(), needles[i].end());
        }
        out.insert(out.end(), filler.begin() + static_cast<std::ptrdiff_t>(cursor), filler.end());
    }
    return out;
}

}  // namespace corpus
}  // namespace stem
