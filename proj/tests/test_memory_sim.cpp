#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "stem/memory_sim.hpp"

using namespace stem;
using namespace stem::sim;

namespace {

// Independent LFU recount with the same contract: counters persist for every
// key ever seen, capacity bounds residents, and eviction scans all residents
// for the minimum (frequency, tick, token, layer). No shared machinery.
class NaiveLfu {
public:
    explicit NaiveLfu(std::size_t cap) : cap_(cap) {}

    bool access_and_admit(std::int32_t token, std::int32_t layer) {
        ++tick_;
        auto key = std::make_pair(token, layer);
        Meta& m = entries_[key];
        m.freq += 1;
        m.tick = tick_;
        if (m.resident) return true;
        if (cap_ == 0) return false;
        std::size_t resident_count = 0;
        for (auto& [k, e] : entries_) {
            if (e.resident) ++resident_count;
        }
        if (resident_count >= cap_) {
            auto victim = entries_.end();
            for (auto e = entries_.begin(); e != entries_.end(); ++e) {
                if (!e->second.resident) continue;
                if (victim == entries_.end() ||
                    std::tie(e->second.freq, e->second.tick, e->first.first, e->first.second) <
                        std::tie(victim->second.freq, victim->second.tick, victim->first.first,
                                 victim->first.second)) {
                    victim = e;
                }
            }
            victim->second.resident = false;
        }
        entries_[key].resident = true;
        return false;
    }

    bool contains(std::int32_t token, std::int32_t layer) const {
        auto it = entries_.find({token, layer});
        return it != entries_.end() && it->second.resident;
    }

private:
    struct Meta {
        std::uint64_t freq = 0;
        std::uint64_t tick = 0;
        bool resident = false;
    };
    std::size_t cap_;
    std::uint64_t tick_ = 0;
    std::map<std::pair<std::int32_t, std::int32_t>, Meta> entries_;
};

double harmonic(std::size_t n) {
    double h = 0.0;
    for (std::size_t r = 1; r <= n; ++r) h += 1.0 / static_cast<double>(r);
    return h;
}

}  // namespace

TEST_CASE("dedup basics and reconstruction") {
    std::vector<std::int32_t> ids{5, 7, 5, 9};
    auto [unique, inverse] = dedup(ids);
    CHECK(unique == std::vector<std::int32_t>{5, 7, 9});
    CHECK(inverse == std::vector<std::size_t>{0, 1, 0, 2});

    auto [eu, ei] = dedup(std::span<const std::int32_t>{});
    CHECK(eu.empty());
    CHECK(ei.empty());

    // Reconstruction oracle over random lists.
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::int32_t> xs(rng.uniform_int(64));
        for (auto& x : xs) x = static_cast<std::int32_t>(rng.uniform_int(16));
        auto [u, inv] = dedup(xs);
        for (std::size_t i = 0; i < xs.size(); ++i) CHECK(u[inv[i]] == xs[i]);
        // Idempotence: dedup of the unique list is the identity.
        auto [u2, inv2] = dedup(u);
        CHECK(u2 == u);
        for (std::size_t i = 0; i < inv2.size(); ++i) CHECK(inv2[i] == i);
    }
}

TEST_CASE("lfu eviction follows frequency then recency") {
    LfuCache cache(2);
    // Accesses a,a,b,c: inserting c evicts b (freq 1 < a's 2).
    CHECK_FALSE(cache.touch(1));
    cache.insert(1);
    CHECK(cache.touch(1));
    CHECK_FALSE(cache.touch(2));
    cache.insert(2);
    CHECK_FALSE(cache.touch(3));
    cache.insert(3);
    CHECK(cache.contains(1));
    CHECK_FALSE(cache.contains(2));
    CHECK(cache.contains(3));

    // Capacity 1 thrash: a,b,a has zero hits.
    LfuCache one(1);
    int hits = 0;
    for (std::int32_t t : {0, 1, 0}) {
        if (one.touch(t)) {
            ++hits;
        } else {
            one.insert(t);
        }
    }
    CHECK(hits == 0);

    // Zero capacity stays empty.
    LfuCache zero(0);
    zero.insert(4);
    CHECK(zero.size() == 0);
}

TEST_CASE("lfu trace equality against the naive recount oracle") {
    Rng rng(2);
    for (std::size_t cap : {1u, 3u, 17u, 64u}) {
        LfuCache cache(cap);
        NaiveLfu naive(cap);
        auto stream = zipf_stream(200, 1.1, 5000, 99 + cap);
        for (std::int32_t t : stream) {
            const std::int32_t layer = static_cast<std::int32_t>(rng.uniform_int(2));
            bool hit = cache.touch(t, layer);
            if (!hit) cache.insert(t, layer);
            bool naive_hit = naive.access_and_admit(t, layer);
            REQUIRE(hit == naive_hit);
        }
    }
}

TEST_CASE("zipf stream statistics") {
    auto ones = zipf_stream(1, 1.0, 100, 3);
    for (std::int32_t t : ones) CHECK(t == 0);

    const std::size_t v = 1000, n = 1000000;
    auto stream = zipf_stream(v, 1.0, n, 4);
    std::vector<std::size_t> counts(v, 0);
    for (std::int32_t t : stream) ++counts[static_cast<std::size_t>(t)];

    const double h = harmonic(v);
    CHECK(std::abs(static_cast<double>(counts[0]) / n - 1.0 / h) < 0.002);
    // Rank-1 over rank-2 frequency approaches 2^s.
    CHECK(static_cast<double>(counts[0]) / static_cast<double>(counts[1]) ==
          doctest::Approx(2.0).epsilon(0.05));

    // Determinism per seed.
    auto again = zipf_stream(v, 1.0, 1000, 4);
    auto prefix = std::vector<std::int32_t>(stream.begin(), stream.begin() + 1000);
    CHECK(again == prefix);
}

TEST_CASE("prefill simulation event accounting") {
    const std::size_t d_ff = 8;
    TierModel tier{2.0, 4.0, 10.0};

    // Everything cached: nothing moves, nothing stalls.
    LfuCache warm(64);
    for (std::int32_t t : {1, 2, 3}) {
        for (std::int32_t l : {0, 1}) warm.insert(t, l);
    }
    auto r = simulate_prefill({{1, 2, 3, 2}}, warm, tier, 2, d_ff);
    CHECK(r.elements_transferred == 0);
    CHECK(r.stall_time == 0.0);
    CHECK(r.total_time == 2 * tier.layer_compute_time);
    CHECK(r.hit_rate == 1.0);

    // Cold cache, one unique token, one layer: d_ff elements, fully exposed.
    LfuCache cold(64);
    auto r1 = simulate_prefill({{5, 5, 5}}, cold, tier, 1, d_ff);
    CHECK(r1.elements_transferred == d_ff);
    CHECK(r1.stall_time == doctest::Approx(tier.host_latency + d_ff / tier.host_bandwidth));

    // Compute dominates transfer: only the first transfer is exposed.
    LfuCache cold2(64);
    auto r2 = simulate_prefill({{1, 2}}, cold2, tier, 3, d_ff);
    const double per_layer_transfer = tier.host_latency + 2.0 * d_ff / tier.host_bandwidth;
    REQUIRE(per_layer_transfer <= tier.layer_compute_time);
    CHECK(r2.stall_time == doctest::Approx(per_layer_transfer));
    CHECK(r2.total_time == doctest::Approx(3 * tier.layer_compute_time + per_layer_transfer));
    // Conservation: elements = d_ff * total misses.
    CHECK(r2.elements_transferred == d_ff * r2.misses);
    CHECK(r2.total_time >= 3 * tier.layer_compute_time);
}

TEST_CASE("decode simulation exposes every transfer") {
    const std::size_t d_ff = 4;
    TierModel tier{1.0, 2.0, 5.0};

    LfuCache warm(16);
    for (std::int32_t l : {0, 1}) warm.insert(9, l);
    std::vector<std::int32_t> all_same(20, 9);
    auto r = simulate_decode(all_same, warm, tier, 2, d_ff);
    CHECK(r.stall_time == 0.0);
    CHECK(r.hit_rate == 1.0);
    CHECK(r.total_time == doctest::Approx(20 * 2 * tier.layer_compute_time));

    // Capacity >= vocabulary converges to hits after the cold start.
    LfuCache big(1000);
    auto stream = zipf_stream(100, 1.0, 5000, 8);
    auto r2 = simulate_decode(stream, big, tier, 1, d_ff);
    CHECK(r2.hit_rate_steady > 0.99);
    CHECK(r2.elements_transferred == d_ff * r2.misses);
    CHECK(r2.total_time >= 5000 * tier.layer_compute_time);
}

TEST_CASE("steady-state decode hit rate tracks the harmonic mass") {
    const std::size_t v = 5000, cap = 500;
    auto stream = zipf_stream(v, 1.0, 200000, 12);
    LfuCache cache(cap);
    TierModel tier{1.0, 1.0, 1.0};
    auto r = simulate_decode(stream, cache, tier, 1, 16);
    const double predicted = harmonic(cap) / harmonic(v);
    CHECK(std::abs(r.hit_rate_steady - predicted) < 0.03);
}

TEST_CASE("lfu hit rate is non-decreasing in capacity") {
    auto stream = zipf_stream(400, 1.0, 30000, 21);
    TierModel tier{1.0, 1.0, 1.0};
    double prev = -1.0;
    for (std::size_t cap : {10u, 40u, 100u, 200u, 400u}) {
        LfuCache cache(cap);
        auto r = simulate_decode(stream, cache, tier, 1, 8);
        CHECK(r.hit_rate >= prev);
        prev = r.hit_rate;
    }
}

TEST_CASE("offloaded table memory accounting") {
    ModelConfig cfg;
    cfg.n_layers = 4;
    cfg.d_model = 16;
    cfg.d_ff = 32;
    cfg.vocab = 64;
    cfg.heads = 2;
    cfg.max_len = 8;

    // Fully table-backed: one third of the FFN matrix memory is freed.
    cfg.variants = {Variant::stem, Variant::stem, Variant::stem, Variant::stem};
    auto full = table_memory_freed(cfg, 10);
    CHECK(full.freed_fraction == doctest::Approx(1.0 / 3.0));
    CHECK(full.offloaded_elements == 4 * cfg.vocab * cfg.d_ff);
    CHECK(full.cache_elements == 10 * cfg.d_ff);
    CHECK(full.resident_bytes == full.resident_elements * 8);

    // One-of-three placement in a 12-layer stack: a ninth of the memory.
    ModelConfig big = cfg;
    big.n_layers = 12;
    big.variants.assign(12, Variant::dense);
    for (std::size_t i : {2u, 5u, 8u, 11u}) big.variants[i] = Variant::stem;
    CHECK(table_memory_freed(big).freed_fraction == doctest::Approx(1.0 / 9.0));

    // No tables, nothing freed.
    ModelConfig dense = cfg;
    dense.variants.assign(4, Variant::dense);
    auto none = table_memory_freed(dense);
    CHECK(none.freed_fraction == 0.0);
    CHECK(none.offloaded_elements == 0);
}
